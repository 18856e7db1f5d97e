//! Neural-network specific ops: softmax family, likelihood gathers, PReLU,
//! per-channel scaling, concatenation, straight-through rounding, batch norm.
//!
//! Ops that reduce or normalize over "channels" treat the tensor as
//! [outer, C, inner]: rank-2 tensors have inner = 1, rank-4 images have
//! inner = H*W with C at axis 1.

use super::{numel_of, Result, Tensor, TensorError};

fn axis1_view(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match shape {
        [o, c] => Ok((*o, *c, 1)),
        [o, c, h, w] => Ok((*o, *c, h * w)),
        _ => Err(TensorError::BadShape {
            op,
            expected: "rank-2 or rank-4 tensor".into(),
            got: shape.to_vec(),
        }),
    }
}

impl Tensor {
    /// Softmax over the channel axis (axis 1).
    pub fn softmax(&self) -> Result<Tensor> {
        let (o, c, inner) = axis1_view(self.shape(), "softmax")?;
        let src = self.data();
        let mut data = vec![0.0; src.len()];
        for b in 0..o {
            for s in 0..inner {
                let idx = |ch: usize| (b * c + ch) * inner + s;
                let mut mx = f64::NEG_INFINITY;
                for ch in 0..c {
                    mx = mx.max(src[idx(ch)]);
                }
                let mut z = 0.0;
                for ch in 0..c {
                    let e = (src[idx(ch)] - mx).exp();
                    data[idx(ch)] = e;
                    z += e;
                }
                for ch in 0..c {
                    data[idx(ch)] /= z;
                }
            }
        }
        drop(src);
        Tensor::make_op(
            "softmax",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![0.0; ctx.upstream.len()];
                for b in 0..o {
                    for s in 0..inner {
                        let idx = |ch: usize| (b * c + ch) * inner + s;
                        let mut dot = 0.0;
                        for ch in 0..c {
                            dot += ctx.upstream[idx(ch)] * ctx.out_data[idx(ch)];
                        }
                        for ch in 0..c {
                            g[idx(ch)] = ctx.out_data[idx(ch)] * (ctx.upstream[idx(ch)] - dot);
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Log-softmax over the channel axis (axis 1).
    pub fn log_softmax(&self) -> Result<Tensor> {
        let (o, c, inner) = axis1_view(self.shape(), "log_softmax")?;
        let src = self.data();
        let mut data = vec![0.0; src.len()];
        for b in 0..o {
            for s in 0..inner {
                let idx = |ch: usize| (b * c + ch) * inner + s;
                let mut mx = f64::NEG_INFINITY;
                for ch in 0..c {
                    mx = mx.max(src[idx(ch)]);
                }
                let mut z = 0.0;
                for ch in 0..c {
                    z += (src[idx(ch)] - mx).exp();
                }
                let lz = mx + z.ln();
                for ch in 0..c {
                    data[idx(ch)] = src[idx(ch)] - lz;
                }
            }
        }
        drop(src);
        Tensor::make_op(
            "log_softmax",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![0.0; ctx.upstream.len()];
                for b in 0..o {
                    for s in 0..inner {
                        let idx = |ch: usize| (b * c + ch) * inner + s;
                        let mut gsum = 0.0;
                        for ch in 0..c {
                            gsum += ctx.upstream[idx(ch)];
                        }
                        for ch in 0..c {
                            g[idx(ch)] =
                                ctx.upstream[idx(ch)] - ctx.out_data[idx(ch)].exp() * gsum;
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Mean negative log-likelihood gathered from log-probabilities.
    /// `self` is [B,C] or [B,C,H,W]; labels index the channel axis and are
    /// laid out as [B] or [B,H,W] row-major.
    pub fn nll_from_log_probs(&self, labels: &[usize]) -> Result<Tensor> {
        let (o, c, inner) = axis1_view(self.shape(), "nll_from_log_probs")?;
        if labels.len() != o * inner {
            return Err(TensorError::Invalid(format!(
                "nll_from_log_probs: {} labels for {} positions",
                labels.len(),
                o * inner
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::Invalid(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let src = self.data();
        let mut acc = 0.0;
        for b in 0..o {
            for s in 0..inner {
                let l = labels[b * inner + s];
                acc -= src[(b * c + l) * inner + s];
            }
        }
        drop(src);
        let count = (o * inner) as f64;
        let labels = labels.to_vec();
        let total = self.numel();
        Tensor::make_op(
            "nll_from_log_probs",
            vec![acc / count],
            vec![1],
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![0.0; total];
                for b in 0..o {
                    for s in 0..inner {
                        let l = labels[b * inner + s];
                        g[(b * c + l) * inner + s] = -ctx.upstream[0] / count;
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// PReLU with one learnable slope per channel.
    pub fn prelu(&self, slope: &Tensor) -> Result<Tensor> {
        let (o, c, inner) = axis1_view(self.shape(), "prelu")?;
        if slope.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "prelu",
                lhs: self.shape().to_vec(),
                rhs: slope.shape().to_vec(),
            });
        }
        let av = slope.to_vec();
        let src = self.data();
        let mut data = vec![0.0; src.len()];
        for b in 0..o {
            for ch in 0..c {
                let a = av[ch];
                for s in 0..inner {
                    let i = (b * c + ch) * inner + s;
                    let x = src[i];
                    data[i] = if x > 0.0 { x } else { a * x };
                }
            }
        }
        drop(src);
        let xin = self.clone();
        Tensor::make_op(
            "prelu",
            data,
            self.shape().to_vec(),
            vec![self.clone(), slope.clone()],
            Box::new(move |ctx| {
                let xv = xin.data();
                let mut gx = vec![0.0; xv.len()];
                let mut ga = vec![0.0; c];
                for b in 0..o {
                    for ch in 0..c {
                        for s in 0..inner {
                            let i = (b * c + ch) * inner + s;
                            let x = xv[i];
                            if x > 0.0 {
                                gx[i] = ctx.upstream[i];
                            } else {
                                gx[i] = ctx.upstream[i] * av[ch];
                                ga[ch] += ctx.upstream[i] * x;
                            }
                        }
                    }
                }
                vec![Some(gx), Some(ga)]
            }),
        )
    }

    /// Multiply channel k of `self` by `weights[k]`. Used for the per-kernel
    /// assignment masks: soft weights scale, hard one-hot weights zero out.
    pub fn scale_channels(&self, weights: &Tensor) -> Result<Tensor> {
        let (o, c, inner) = axis1_view(self.shape(), "scale_channels")?;
        if weights.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "scale_channels",
                lhs: self.shape().to_vec(),
                rhs: weights.shape().to_vec(),
            });
        }
        let wv = weights.to_vec();
        let src = self.data();
        let mut data = vec![0.0; src.len()];
        for b in 0..o {
            for ch in 0..c {
                let w = wv[ch];
                for s in 0..inner {
                    let i = (b * c + ch) * inner + s;
                    data[i] = src[i] * w;
                }
            }
        }
        drop(src);
        let xin = self.clone();
        Tensor::make_op(
            "scale_channels",
            data,
            self.shape().to_vec(),
            vec![self.clone(), weights.clone()],
            Box::new(move |ctx| {
                let xv = xin.data();
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; c];
                for b in 0..o {
                    for ch in 0..c {
                        for s in 0..inner {
                            let i = (b * c + ch) * inner + s;
                            gx[i] = ctx.upstream[i] * wv[ch];
                            gw[ch] += ctx.upstream[i] * xv[i];
                        }
                    }
                }
                vec![Some(gx), Some(gw)]
            }),
        )
    }

    /// Multiply by a learnable 1-element tensor (cross-stitch coefficients).
    pub fn scale_by(&self, s: &Tensor) -> Result<Tensor> {
        if s.shape() != [1] {
            return Err(TensorError::BadShape {
                op: "scale_by",
                expected: "shape [1] scalar".into(),
                got: s.shape().to_vec(),
            });
        }
        let sv = s.item();
        let data: Vec<f64> = self.data().iter().map(|a| a * sv).collect();
        let xin = self.clone();
        Tensor::make_op(
            "scale_by",
            data,
            self.shape().to_vec(),
            vec![self.clone(), s.clone()],
            Box::new(move |ctx| {
                let xv = xin.data();
                let gs: f64 = ctx.upstream.iter().zip(xv.iter()).map(|(g, x)| g * x).sum();
                vec![
                    Some(ctx.upstream.iter().map(|g| g * sv).collect()),
                    Some(vec![gs]),
                ]
            }),
        )
    }

    /// Concatenate rank-4 tensors along the channel axis.
    pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concat_channels of nothing".into()));
        }
        let [b0, _, h0, w0] = parts[0].rank4("concat_channels")?;
        let mut channels = Vec::with_capacity(parts.len());
        for p in parts {
            let [b, c, h, w] = p.rank4("concat_channels")?;
            if b != b0 || h != h0 || w != w0 {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            channels.push(c);
        }
        let ctot: usize = channels.iter().sum();
        let inner = h0 * w0;
        let mut data = vec![0.0; b0 * ctot * inner];
        for b in 0..b0 {
            let mut off = 0;
            for (p, &c) in parts.iter().zip(&channels) {
                let src = p.data();
                let len = c * inner;
                data[(b * ctot + off) * inner..(b * ctot + off) * inner + len]
                    .copy_from_slice(&src[b * len..(b + 1) * len]);
                off += c;
            }
        }
        let chans = channels.clone();
        Tensor::make_op(
            "concat_channels",
            data,
            vec![b0, ctot, h0, w0],
            parts.to_vec(),
            Box::new(move |ctx| {
                let mut out = Vec::with_capacity(chans.len());
                let mut off = 0;
                for &c in &chans {
                    let len = c * inner;
                    let mut g = vec![0.0; b0 * len];
                    for b in 0..b0 {
                        g[b * len..(b + 1) * len].copy_from_slice(
                            &ctx.upstream
                                [(b * ctot + off) * inner..(b * ctot + off) * inner + len],
                        );
                    }
                    out.push(Some(g));
                    off += c;
                }
                out
            }),
        )
    }

    /// Forward: row-wise argmax one-hot of a rank-2 tensor.
    /// Backward: identity (straight-through).
    pub fn straight_through_onehot(&self) -> Result<Tensor> {
        let [k, c] = self.rank2("straight_through_onehot")?;
        let src = self.data();
        let mut data = vec![0.0; k * c];
        for i in 0..k {
            let row = &src[i * c..(i + 1) * c];
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            data[i * c + best] = 1.0;
        }
        drop(src);
        Tensor::make_op(
            "straight_through_onehot",
            data,
            vec![k, c],
            vec![self.clone()],
            Box::new(|ctx| vec![Some(ctx.upstream.to_vec())]),
        )
    }

    /// Sum over batch and spatial dims, leaving [C]. Used by the Dice loss.
    pub fn sum_per_channel(&self) -> Result<Tensor> {
        let (o, c, inner) = axis1_view(self.shape(), "sum_per_channel")?;
        let src = self.data();
        let mut data = vec![0.0; c];
        for b in 0..o {
            for ch in 0..c {
                for s in 0..inner {
                    data[ch] += src[(b * c + ch) * inner + s];
                }
            }
        }
        drop(src);
        Tensor::make_op(
            "sum_per_channel",
            data,
            vec![c],
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![0.0; o * c * inner];
                for b in 0..o {
                    for ch in 0..c {
                        for s in 0..inner {
                            g[(b * c + ch) * inner + s] = ctx.upstream[ch];
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Batch normalization with current-batch statistics (both train and eval
    /// normalize this way; running stats are kept by the caller but unused at
    /// inference). Reduces over batch and spatial dims per channel, eps 1e-5.
    pub fn batch_norm(&self, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        const EPS: f64 = 1e-5;
        let (o, c, inner) = axis1_view(self.shape(), "batch_norm")?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let m = o * inner;
        if m < 2 {
            return Err(TensorError::Invalid(
                "batch_norm needs at least 2 values per channel to estimate variance".into(),
            ));
        }
        let src = self.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..o {
                for sp in 0..inner {
                    s += src[(b * c + ch) * inner + sp];
                }
            }
            mean[ch] = s / m as f64;
            let mut v = 0.0;
            for b in 0..o {
                for sp in 0..inner {
                    let d = src[(b * c + ch) * inner + sp] - mean[ch];
                    v += d * d;
                }
            }
            var[ch] = v / m as f64;
        }
        let gv = gamma.to_vec();
        let bv = beta.to_vec();
        let mut data = vec![0.0; src.len()];
        let mut xhat = vec![0.0; src.len()];
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + EPS).sqrt();
            for b in 0..o {
                for sp in 0..inner {
                    let i = (b * c + ch) * inner + sp;
                    let xh = (src[i] - mean[ch]) * inv;
                    xhat[i] = xh;
                    data[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        drop(src);
        Tensor::make_op(
            "batch_norm",
            data,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |ctx| {
                let mut gx = vec![0.0; ctx.upstream.len()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for ch in 0..c {
                    let inv = 1.0 / (var[ch] + EPS).sqrt();
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for b in 0..o {
                        for sp in 0..inner {
                            let i = (b * c + ch) * inner + sp;
                            let dxhat = ctx.upstream[i] * gv[ch];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat[i];
                            gg[ch] += ctx.upstream[i] * xhat[i];
                            gb[ch] += ctx.upstream[i];
                        }
                    }
                    let mf = m as f64;
                    for b in 0..o {
                        for sp in 0..inner {
                            let i = (b * c + ch) * inner + sp;
                            let dxhat = ctx.upstream[i] * gv[ch];
                            gx[i] = inv / mf
                                * (mf * dxhat - sum_dxhat - xhat[i] * sum_dxhat_xhat);
                        }
                    }
                }
                vec![Some(gx), Some(gg), Some(gb)]
            }),
        )
    }

    /// Row-wise argmax of a rank-2 tensor (no gradient; plain inspection).
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let [k, c] = self.rank2("argmax_rows")?;
        let src = self.data();
        Ok((0..k)
            .map(|i| {
                let row = &src[i * c..(i + 1) * c];
                let mut best = 0;
                for j in 1..c {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    /// Channel-wise argmax for [B,C] or [B,C,H,W]: one label per position.
    pub fn argmax_channels(&self) -> Result<Vec<usize>> {
        let (o, c, inner) = axis1_view(self.shape(), "argmax_channels")?;
        let src = self.data();
        let mut out = vec![0usize; o * inner];
        for b in 0..o {
            for s in 0..inner {
                let mut best = 0;
                for ch in 1..c {
                    if src[(b * c + ch) * inner + s] > src[(b * c + best) * inner + s] {
                        best = ch;
                    }
                }
                out[b * inner + s] = best;
            }
        }
        let _ = numel_of(self.shape());
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prelu_definition() {
        let x = Tensor::from_vec(vec![-2.0, 3.0], &[1, 2]).unwrap();
        let a = Tensor::from_vec(vec![0.25, 0.25], &[2]).unwrap();
        let y = x.prelu(&a).unwrap();
        assert_eq!(y.to_vec(), vec![-0.5, 3.0]);
    }

    #[test]
    fn prelu_zero_slope_is_relu() {
        let x = Tensor::from_vec(vec![-2.0, 3.0, -1.0, 0.5], &[2, 2]).unwrap();
        let a = Tensor::zeros(&[2]);
        let y = x.prelu(&a).unwrap();
        assert_eq!(y.to_vec(), vec![0.0, 3.0, 0.0, 0.5]);
    }

    #[test]
    fn prelu_slope_gradient() {
        let x = Tensor::from_vec(vec![-2.0], &[1, 1]).unwrap();
        let a = Tensor::param(vec![0.25], &[1]).unwrap();
        let y = x.prelu(&a).unwrap().sum().unwrap();
        y.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![-2.0]);
    }

    #[test]
    fn softmax_uniform() {
        let x = Tensor::zeros(&[1, 4]);
        let y = x.softmax().unwrap();
        for v in y.to_vec() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn nll_uniform_two_classes_is_ln2() {
        let logits = Tensor::zeros(&[3, 2]);
        let loss = logits.log_softmax().unwrap().nll_from_log_probs(&[0, 1, 0]).unwrap();
        assert!((loss.item() - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_rejects_out_of_range_label() {
        let logits = Tensor::zeros(&[1, 2]);
        let lp = logits.log_softmax().unwrap();
        assert!(lp.nll_from_log_probs(&[2]).is_err());
    }

    #[test]
    fn batch_norm_constant_channel_outputs_beta() {
        let x = Tensor::from_vec(vec![5.0; 8], &[2, 1, 2, 2]).unwrap();
        let gamma = Tensor::ones(&[1]);
        let beta = Tensor::from_vec(vec![0.7], &[1]).unwrap();
        let y = x.batch_norm(&gamma, &beta).unwrap();
        for v in y.to_vec() {
            assert!((v - 0.7).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_norm_two_sample_symmetry() {
        let x = Tensor::from_vec(vec![0.0, 2.0], &[2, 1]).unwrap();
        let y = x
            .batch_norm(&Tensor::ones(&[1]), &Tensor::zeros(&[1]))
            .unwrap();
        let v = y.to_vec();
        assert!((v[0] + 1.0).abs() < 1e-4 && (v[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn batch_norm_single_sample_errors() {
        let x = Tensor::from_vec(vec![1.0], &[1, 1]).unwrap();
        assert!(x
            .batch_norm(&Tensor::ones(&[1]), &Tensor::zeros(&[1]))
            .is_err());
    }

    #[test]
    fn straight_through_forward_is_onehot_backward_is_identity() {
        let x = Tensor::param(vec![0.2, 0.5, 0.3], &[1, 3]).unwrap();
        let y = x.straight_through_onehot().unwrap();
        assert_eq!(y.to_vec(), vec![0.0, 1.0, 0.0]);
        let loss = y.mul(&Tensor::from_vec(vec![1.0, 2.0, 3.0], &[1, 3]).unwrap())
            .unwrap()
            .sum()
            .unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn concat_channels_roundtrip() {
        let a = Tensor::from_vec((0..4).map(|v| v as f64).collect(), &[1, 1, 2, 2]).unwrap();
        let b = Tensor::from_vec((4..12).map(|v| v as f64).collect(), &[1, 2, 2, 2]).unwrap();
        let c = Tensor::concat_channels(&[a, b]).unwrap();
        assert_eq!(c.shape(), &[1, 3, 2, 2]);
        assert_eq!(c.to_vec(), (0..12).map(|v| v as f64).collect::<Vec<_>>());
    }

    #[test]
    fn scale_channels_masks() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 2, 1, 2]).unwrap();
        let w = Tensor::from_vec(vec![0.0, 1.0], &[2]).unwrap();
        let y = x.scale_channels(&w).unwrap();
        assert_eq!(y.to_vec(), vec![0.0, 0.0, 3.0, 4.0]);
    }
}
