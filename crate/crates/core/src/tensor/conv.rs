//! 2-D convolution (cross-correlation), max pooling and global average pooling.

use super::linalg::{gemm_a_bt_acc, gemm_acc, gemm_at_b_acc};
use super::{Result, Tensor, TensorError};

#[allow(clippy::too_many_arguments)]
fn im2col(
    src: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [f64],
) {
    // col is [cin*kh*kw, oh*ow]
    let cols = oh * ow;
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        dst[oy * ow..(oy + 1) * ow].fill(0.0);
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        dst[oy * ow + ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[base + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_acc(
    col: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dst: &mut [f64],
) {
    let cols = oh * ow;
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// Cross-correlation of [B,Cin,H,W] with kernels [Cout,Cin,kh,kw],
    /// zero padding. Gradients flow to both input and kernels.
    pub fn conv2d(&self, kernels: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let [bsz, cin, h, w] = self.rank4("conv2d")?;
        let [cout, kcin, kh, kw] = kernels.rank4("conv2d")?;
        if cin != kcin {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: kernels.shape().to_vec(),
            });
        }
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(TensorError::Invalid(
                "conv2d: stride and kernel extent must be >= 1".into(),
            ));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::Invalid(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let ckk = cin * kh * kw;
        let cols = oh * ow;

        let mut out = vec![0.0; bsz * cout * cols];
        let mut col = vec![0.0; ckk * cols];
        {
            let x = self.data();
            let k = kernels.data();
            for b in 0..bsz {
                im2col(
                    &x[b * cin * h * w..(b + 1) * cin * h * w],
                    cin,
                    h,
                    w,
                    kh,
                    kw,
                    stride,
                    pad,
                    oh,
                    ow,
                    &mut col,
                );
                gemm_acc(
                    &k,
                    &col,
                    &mut out[b * cout * cols..(b + 1) * cout * cols],
                    cout,
                    ckk,
                    cols,
                );
            }
        }

        let xin = self.clone();
        let kin = kernels.clone();
        Tensor::make_op(
            "conv2d",
            out,
            vec![bsz, cout, oh, ow],
            vec![self.clone(), kernels.clone()],
            Box::new(move |ctx| {
                let x = xin.data();
                let k = kin.data();
                let mut gx = vec![0.0; x.len()];
                let mut gk = vec![0.0; k.len()];
                let mut col = vec![0.0; ckk * cols];
                let mut gcol = vec![0.0; ckk * cols];
                for b in 0..bsz {
                    let g = &ctx.upstream[b * cout * cols..(b + 1) * cout * cols];
                    // dK += g . col^T  (col recomputed from the saved input)
                    im2col(
                        &x[b * cin * h * w..(b + 1) * cin * h * w],
                        cin,
                        h,
                        w,
                        kh,
                        kw,
                        stride,
                        pad,
                        oh,
                        ow,
                        &mut col,
                    );
                    gemm_a_bt_acc(g, &col, &mut gk, cout, cols, ckk);
                    // dcol = K^T . g, scattered back to the input
                    gcol.fill(0.0);
                    gemm_at_b_acc(&k, g, &mut gcol, ckk, cout, cols);
                    col2im_acc(
                        &gcol,
                        cin,
                        h,
                        w,
                        kh,
                        kw,
                        stride,
                        pad,
                        oh,
                        ow,
                        &mut gx[b * cin * h * w..(b + 1) * cin * h * w],
                    );
                }
                vec![Some(gx), Some(gk)]
            }),
        )
    }

    /// Max pooling with square window and stride, no padding.
    pub fn max_pool2d(&self, ksize: usize, stride: usize) -> Result<Tensor> {
        let [bsz, c, h, w] = self.rank4("max_pool2d")?;
        if ksize == 0 || stride == 0 || h < ksize || w < ksize {
            return Err(TensorError::Invalid(format!(
                "max_pool2d: window {ksize} stride {stride} on {h}x{w} input"
            )));
        }
        let oh = (h - ksize) / stride + 1;
        let ow = (w - ksize) / stride + 1;
        let src = self.data();
        let mut out = vec![0.0; bsz * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for b in 0..bsz {
            for ch in 0..c {
                let plane = (b * c + ch) * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = plane + (oy * stride) * w + ox * stride;
                        let mut bv = src[best];
                        for ky in 0..ksize {
                            for kx in 0..ksize {
                                let i = plane + (oy * stride + ky) * w + ox * stride + kx;
                                if src[i] > bv {
                                    bv = src[i];
                                    best = i;
                                }
                            }
                        }
                        let o = (b * c + ch) * oh * ow + oy * ow + ox;
                        out[o] = bv;
                        argmax[o] = best;
                    }
                }
            }
        }
        drop(src);
        let in_len = self.numel();
        Tensor::make_op(
            "max_pool2d",
            out,
            vec![bsz, c, oh, ow],
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![0.0; in_len];
                for (o, &src_i) in argmax.iter().enumerate() {
                    g[src_i] += ctx.upstream[o];
                }
                vec![Some(g)]
            }),
        )
    }

    /// Spatial mean per channel: [B,C,H,W] -> [B,C].
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let [bsz, c, h, w] = self.rank4("global_avg_pool")?;
        let inner = h * w;
        let src = self.data();
        let mut out = vec![0.0; bsz * c];
        for b in 0..bsz {
            for ch in 0..c {
                let s: f64 = src[(b * c + ch) * inner..(b * c + ch + 1) * inner].iter().sum();
                out[b * c + ch] = s / inner as f64;
            }
        }
        drop(src);
        Tensor::make_op(
            "global_avg_pool",
            out,
            vec![bsz, c],
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![0.0; bsz * c * inner];
                for b in 0..bsz {
                    for ch in 0..c {
                        let gv = ctx.upstream[b * c + ch] / inner as f64;
                        g[(b * c + ch) * inner..(b * c + ch + 1) * inner].fill(gv);
                    }
                }
                vec![Some(g)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_of_ones_sums_window() {
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let k = Tensor::ones(&[1, 1, 3, 3]);
        let y = x.conv2d(&k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let x = Tensor::from_vec((0..16).map(|v| v as f64).collect(), &[1, 1, 4, 4]).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0; // center tap
        let k = Tensor::from_vec(k, &[1, 1, 3, 3]).unwrap();
        let y = x.conv2d(&k, 1, 1).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn conv_channel_mismatch_names_shapes() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        let err = x.conv2d(&k, 1, 1).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 4, 4]") && err.contains("[1, 3, 3, 3]"), "{err}");
    }

    #[test]
    fn max_pool_picks_max_and_routes_gradient() {
        let x = Tensor::param(vec![1.0, 5.0, 2.0, 3.0], &[1, 1, 2, 2]).unwrap();
        let y = x.max_pool2d(2, 2).unwrap();
        assert_eq!(y.item(), 5.0);
        y.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn gap_of_constant_map_is_the_constant() {
        let x = Tensor::from_vec(vec![3.5; 32], &[2, 1, 4, 4]).unwrap();
        let y = x.global_avg_pool().unwrap();
        assert_eq!(y.to_vec(), vec![3.5, 3.5]);
    }
}
