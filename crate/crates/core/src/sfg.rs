//! The SFG convolution layer: convolve with the full kernel bank, split the
//! output channels into task-1 / shared / task-2 feature maps by the sampled
//! per-kernel assignment, and route/merge the triples between layers.
//!
//! Kernels are never physically regrouped; masking is per-channel scaling of
//! the full-bank output, so shapes stay static while group sizes vary per
//! sample and the triple always forms a partition of unity of the full
//! convolution output.

use crate::concrete::{AssignmentSample, GroupingParams};
use crate::tensor::{Result, Tensor, TensorError};

/// Column j of a [K, C] tensor as a [K] vector (differentiable).
fn column(t: &Tensor, j: usize) -> Result<Tensor> {
    let [k, c] = match t.shape() {
        [k, c] => [*k, *c],
        other => {
            return Err(TensorError::BadShape {
                op: "column",
                expected: "rank-2 tensor".into(),
                got: other.to_vec(),
            })
        }
    };
    let src = t.data();
    let data: Vec<f64> = (0..k).map(|i| src[i * c + j]).collect();
    drop(src);
    Tensor::make_op(
        "column",
        data,
        vec![k],
        vec![t.clone()],
        Box::new(move |ctx| {
            let mut g = vec![0.0; k * c];
            for i in 0..k {
                g[i * c + j] = ctx.upstream[i];
            }
            vec![Some(g)]
        }),
    )
}

/// One SFG convolution site: a full kernel bank plus its grouping
/// distribution and conv hyperparameters.
pub struct SfgLayer {
    /// [K, Cin, kh, kw]
    pub kernels: Tensor,
    pub grouping: GroupingParams,
    pub stride: usize,
    pub pad: usize,
}

impl SfgLayer {
    pub fn new(kernels: Tensor, grouping: GroupingParams, stride: usize, pad: usize) -> Result<SfgLayer> {
        let [k, _, _, _] = kernels.rank4("SfgLayer::new")?;
        if grouping.num_kernels() != k {
            return Err(TensorError::Invalid(format!(
                "grouping has {} rows for {k} kernels",
                grouping.num_kernels()
            )));
        }
        Ok(SfgLayer {
            kernels,
            grouping,
            stride,
            pad,
        })
    }

    pub fn num_kernels(&self) -> usize {
        self.kernels.shape()[0]
    }
}

/// Task-1 / shared / task-2 feature maps, sparse at complementary channels.
pub struct FeatureTriple {
    pub f1: Tensor,
    pub fs: Tensor,
    pub f2: Tensor,
}

/// How `[F_i | F_s]` is merged on the routes into the next layer's groups.
pub enum MergeSpec {
    /// Pixel-wise summation (the default for identity-like transforms).
    Sum,
    /// Channel concat followed by a 1x1 convolution back to F_s width;
    /// used when the inter-layer transform is a residual block.
    Concat1x1 {
        /// [K, 2K, 1, 1] kernels for the task-1 route
        w1: Tensor,
        /// [K, 2K, 1, 1] kernels for the task-2 route
        w2: Tensor,
    },
}

impl MergeSpec {
    /// Merge a task branch with the shared branch: `[F_i | F_s]`.
    pub fn merge(&self, task: &Tensor, shared: &Tensor, which_task: usize) -> Result<Tensor> {
        match self {
            MergeSpec::Sum => task.add(shared),
            MergeSpec::Concat1x1 { w1, w2 } => {
                let w = if which_task == 1 { w1 } else { w2 };
                Tensor::concat_channels(&[task.clone(), shared.clone()])?.conv2d(w, 1, 0)
            }
        }
    }
}

/// Convolve with the full bank and split into the feature triple:
/// `F_i[:, k] = z_i^(k) * (input * M)[:, k]`.
pub fn sfg_forward(layer: &SfgLayer, input: &Tensor, sample: &AssignmentSample) -> Result<FeatureTriple> {
    let k = layer.num_kernels();
    if sample.z.shape() != [k, 3] {
        return Err(TensorError::Invalid(format!(
            "assignment sample has shape {:?} for a layer with {k} kernels",
            sample.z.shape()
        )));
    }
    let full = input.conv2d(&layer.kernels, layer.stride, layer.pad)?;
    let z1 = column(&sample.z, 0)?;
    let zs = column(&sample.z, 1)?;
    let z2 = column(&sample.z, 2)?;
    Ok(FeatureTriple {
        f1: full.scale_channels(&z1)?,
        fs: full.scale_channels(&zs)?,
        f2: full.scale_channels(&z2)?,
    })
}

/// Result of a routed layer application: the masked triple plus the three
/// full-bank convolution outputs (one per route input), kept for
/// activation inspection.
pub struct RoutedForward {
    pub triple: FeatureTriple,
    /// full-bank conv of [in1, ins, in2]; entries alias when inputs alias
    pub full: [Tensor; 3],
}

/// Apply the layer with per-group inputs: group G_i convolves its own
/// routed input, so `F_i = conv(in_i, M) ⊙ z_i`. Identical inputs are
/// convolved once.
pub fn sfg_forward_routed(
    layer: &SfgLayer,
    in1: &Tensor,
    ins: &Tensor,
    in2: &Tensor,
    sample: &AssignmentSample,
) -> Result<RoutedForward> {
    let k = layer.num_kernels();
    if sample.z.shape() != [k, 3] {
        return Err(TensorError::Invalid(format!(
            "assignment sample has shape {:?} for a layer with {k} kernels",
            sample.z.shape()
        )));
    }
    let fulls = ins.conv2d(&layer.kernels, layer.stride, layer.pad)?;
    let full1 = if in1.id() == ins.id() {
        fulls.clone()
    } else {
        in1.conv2d(&layer.kernels, layer.stride, layer.pad)?
    };
    let full2 = if in2.id() == ins.id() {
        fulls.clone()
    } else if in2.id() == in1.id() {
        full1.clone()
    } else {
        in2.conv2d(&layer.kernels, layer.stride, layer.pad)?
    };
    let z1 = column(&sample.z, 0)?;
    let zs = column(&sample.z, 1)?;
    let z2 = column(&sample.z, 2)?;
    Ok(RoutedForward {
        triple: FeatureTriple {
            f1: full1.scale_channels(&z1)?,
            fs: fulls.scale_channels(&zs)?,
            f2: full2.scale_channels(&z2)?,
        },
        full: [full1, fulls, full2],
    })
}

/// The first layer convolves the raw image; identical to `sfg_forward`.
pub fn first_layer_forward(
    layer: &SfgLayer,
    image: &Tensor,
    sample: &AssignmentSample,
) -> Result<FeatureTriple> {
    sfg_forward(layer, image, sample)
}

/// Route a feature triple to the next layer's three groups:
/// G1 sees h1([F1|Fs]), Gs sees hs(Fs), G2 sees h2([F2|Fs]).
pub fn route<H1, HS, H2>(
    prev: &FeatureTriple,
    merge: &MergeSpec,
    h1: H1,
    hs: HS,
    h2: H2,
) -> Result<(Tensor, Tensor, Tensor)>
where
    H1: FnOnce(&Tensor) -> Result<Tensor>,
    HS: FnOnce(&Tensor) -> Result<Tensor>,
    H2: FnOnce(&Tensor) -> Result<Tensor>,
{
    if prev.f1.shape() != prev.fs.shape() || prev.f2.shape() != prev.fs.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "route",
            lhs: prev.f1.shape().to_vec(),
            rhs: prev.fs.shape().to_vec(),
        });
    }
    let in1 = h1(&merge.merge(&prev.f1, &prev.fs, 1)?)?;
    let ins = hs(&prev.fs)?;
    let in2 = h2(&merge.merge(&prev.f2, &prev.fs, 2)?)?;
    Ok((in1, ins, in2))
}

/// Final merge feeding the two prediction heads: `[F_i | F_s]` per task.
pub fn head_merge(last: &FeatureTriple, merge: &MergeSpec) -> Result<(Tensor, Tensor)> {
    Ok((
        merge.merge(&last.f1, &last.fs, 1)?,
        merge.merge(&last.f2, &last.fs, 2)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concrete::gsm_sample;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rand_tensor(rng: &mut ChaCha20Rng, shape: &[usize]) -> Tensor {
        use rand::Rng;
        let n: usize = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape).unwrap()
    }

    #[test]
    fn all_shared_sample_zeroes_task_maps() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let kernels = rand_tensor(&mut rng, &[4, 1, 3, 3]);
        let layer = SfgLayer::new(
            kernels,
            GroupingParams::frozen(&[[0.0, 1.0, 0.0]; 4]).unwrap(),
            1,
            1,
        )
        .unwrap();
        let input = rand_tensor(&mut rng, &[1, 1, 6, 6]);
        let sample = gsm_sample(&layer.grouping, 0.5, &mut rng, false).unwrap();
        let triple = sfg_forward(&layer, &input, &sample).unwrap();
        assert!(triple.f1.to_vec().iter().all(|&v| v == 0.0));
        assert!(triple.f2.to_vec().iter().all(|&v| v == 0.0));
        let full = input.conv2d(&layer.kernels, 1, 1).unwrap();
        assert_eq!(triple.fs.to_vec(), full.to_vec());
    }

    #[test]
    fn uniform_soft_sample_gives_thirds() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let kernels = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let layer = SfgLayer::new(
            kernels,
            GroupingParams::frozen(&[[1.0 / 3.0; 3]; 3]).unwrap(),
            1,
            1,
        )
        .unwrap();
        let input = rand_tensor(&mut rng, &[2, 2, 5, 5]);
        // constant uniform z, bypassing the sampler
        let z = Tensor::from_vec(vec![1.0 / 3.0; 9], &[3, 3]).unwrap();
        let sample = AssignmentSample {
            z,
            tau: 1.0,
            hard: false,
        };
        let triple = sfg_forward(&layer, &input, &sample).unwrap();
        let full = input.conv2d(&layer.kernels, 1, 1).unwrap().to_vec();
        for (part, name) in [(&triple.f1, "f1"), (&triple.fs, "fs"), (&triple.f2, "f2")] {
            for (a, b) in part.to_vec().iter().zip(&full) {
                assert!((a - b / 3.0).abs() < 1e-12, "{name}");
            }
        }
    }

    #[test]
    fn partition_of_unity() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let kernels = rand_tensor(&mut rng, &[5, 1, 3, 3]);
        let gp = GroupingParams::learned(5, [0.2, 0.6, 0.2]).unwrap();
        let layer = SfgLayer::new(kernels, gp, 1, 1).unwrap();
        let input = rand_tensor(&mut rng, &[1, 1, 8, 8]);
        for hard in [false, true] {
            let sample = gsm_sample(&layer.grouping, 0.4, &mut rng, hard).unwrap();
            let triple = sfg_forward(&layer, &input, &sample).unwrap();
            let full = input.conv2d(&layer.kernels, 1, 1).unwrap().to_vec();
            let sum: Vec<f64> = triple
                .f1
                .to_vec()
                .iter()
                .zip(triple.fs.to_vec())
                .zip(triple.f2.to_vec())
                .map(|((a, b), c)| a + b + c)
                .collect();
            for (s, f) in sum.iter().zip(&full) {
                assert!((s - f).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn hard_assignment_matches_partitioned_convolutions() {
        // kernels {0,1} -> G1, {2} -> Gs, {3} -> G2
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let kernels = rand_tensor(&mut rng, &[4, 2, 3, 3]);
        let rows = [
            [1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ];
        let layer = SfgLayer::new(kernels.clone(), GroupingParams::frozen(&rows).unwrap(), 1, 1).unwrap();
        let input = rand_tensor(&mut rng, &[1, 2, 6, 6]);
        let sample = gsm_sample(&layer.grouping, 1.0, &mut rng, false).unwrap();
        let triple = sfg_forward(&layer, &input, &sample).unwrap();

        // oracle: run the three separate convolutions with the kernel
        // subsets, placed back at their original channel indices
        let kv = kernels.to_vec();
        let ksz = 2 * 3 * 3;
        let subset = |idx: &[usize]| {
            let mut data = Vec::new();
            for &i in idx {
                data.extend_from_slice(&kv[i * ksz..(i + 1) * ksz]);
            }
            Tensor::from_vec(data, &[idx.len(), 2, 3, 3]).unwrap()
        };
        let place = |out: &Tensor, idx: &[usize]| {
            let [_, _, oh, ow] = out.rank4("t").unwrap();
            let mut full = vec![0.0; 4 * oh * ow];
            let ov = out.to_vec();
            for (j, &i) in idx.iter().enumerate() {
                full[i * oh * ow..(i + 1) * oh * ow]
                    .copy_from_slice(&ov[j * oh * ow..(j + 1) * oh * ow]);
            }
            full
        };
        let o1 = input.conv2d(&subset(&[0, 1]), 1, 1).unwrap();
        let os = input.conv2d(&subset(&[2]), 1, 1).unwrap();
        let o2 = input.conv2d(&subset(&[3]), 1, 1).unwrap();
        for (got, want) in [
            (triple.f1.to_vec(), place(&o1, &[0, 1])),
            (triple.fs.to_vec(), place(&os, &[2])),
            (triple.f2.to_vec(), place(&o2, &[3])),
        ] {
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sample_row_count_mismatch_errors() {
        let kernels = Tensor::zeros(&[4, 1, 3, 3]);
        let layer = SfgLayer::new(kernels, GroupingParams::frozen(&[[0.0, 1.0, 0.0]; 4]).unwrap(), 1, 1).unwrap();
        let bad = AssignmentSample {
            z: Tensor::from_vec(vec![0.0, 1.0, 0.0], &[1, 3]).unwrap(),
            tau: 1.0,
            hard: false,
        };
        let input = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(sfg_forward(&layer, &input, &bad).is_err());
    }

    #[test]
    fn routed_forward_with_identical_inputs_matches_single_input_forward() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let kernels = rand_tensor(&mut rng, &[4, 2, 3, 3]);
        let gp = GroupingParams::learned(4, [0.2, 0.6, 0.2]).unwrap();
        let layer = SfgLayer::new(kernels, gp, 1, 1).unwrap();
        let x = rand_tensor(&mut rng, &[1, 2, 6, 6]);
        let sample = gsm_sample(&layer.grouping, 0.7, &mut rng, false).unwrap();
        let a = sfg_forward(&layer, &x, &sample).unwrap();
        let b = sfg_forward_routed(&layer, &x, &x, &x, &sample).unwrap();
        assert_eq!(a.f1.to_vec(), b.triple.f1.to_vec());
        assert_eq!(a.fs.to_vec(), b.triple.fs.to_vec());
        assert_eq!(a.f2.to_vec(), b.triple.f2.to_vec());
    }

    #[test]
    fn routed_forward_uses_per_group_inputs() {
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        let kernels = rand_tensor(&mut rng, &[3, 1, 3, 3]);
        let rows = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let layer = SfgLayer::new(kernels.clone(), GroupingParams::frozen(&rows).unwrap(), 1, 1).unwrap();
        let in1 = rand_tensor(&mut rng, &[1, 1, 5, 5]);
        let ins = rand_tensor(&mut rng, &[1, 1, 5, 5]);
        let in2 = rand_tensor(&mut rng, &[1, 1, 5, 5]);
        let sample = gsm_sample(&layer.grouping, 0.5, &mut rng, false).unwrap();
        let rf = sfg_forward_routed(&layer, &in1, &ins, &in2, &sample).unwrap();
        // kernel 0 on in1, kernel 1 on ins, kernel 2 on in2
        let pick = |t: &Tensor, ch: usize| {
            let v = t.to_vec();
            v[ch * 25..(ch + 1) * 25].to_vec()
        };
        let o1 = in1.conv2d(&kernels, 1, 1).unwrap();
        let os = ins.conv2d(&kernels, 1, 1).unwrap();
        let o2 = in2.conv2d(&kernels, 1, 1).unwrap();
        assert_eq!(pick(&rf.triple.f1, 0), pick(&o1, 0));
        assert_eq!(pick(&rf.triple.fs, 1), pick(&os, 1));
        assert_eq!(pick(&rf.triple.f2, 2), pick(&o2, 2));
        // complementary channels are zeroed
        assert!(pick(&rf.triple.f1, 1).iter().all(|&v| v == 0.0));
        assert!(pick(&rf.triple.f1, 2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_route_falls_back_to_shared() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let fs = rand_tensor(&mut rng, &[1, 3, 4, 4]);
        let zero = Tensor::zeros(&[1, 3, 4, 4]);
        let triple = FeatureTriple {
            f1: zero.clone(),
            fs: fs.clone(),
            f2: zero,
        };
        let id = |t: &Tensor| Ok(t.clone());
        let (in1, ins, in2) = route(&triple, &MergeSpec::Sum, id, id, id).unwrap();
        assert_eq!(in1.to_vec(), fs.to_vec());
        assert_eq!(ins.to_vec(), fs.to_vec());
        assert_eq!(in2.to_vec(), fs.to_vec());
    }

    #[test]
    fn zero_shared_isolates_task_branches() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let f1 = rand_tensor(&mut rng, &[1, 2, 4, 4]);
        let f2 = rand_tensor(&mut rng, &[1, 2, 4, 4]);
        let triple = FeatureTriple {
            f1: f1.clone(),
            fs: Tensor::zeros(&[1, 2, 4, 4]),
            f2: f2.clone(),
        };
        let id = |t: &Tensor| Ok(t.clone());
        let (in1, ins, in2) = route(&triple, &MergeSpec::Sum, id, id, id).unwrap();
        assert_eq!(in1.to_vec(), f1.to_vec());
        assert!(ins.to_vec().iter().all(|&v| v == 0.0));
        assert_eq!(in2.to_vec(), f2.to_vec());
    }

    #[test]
    fn concat_1x1_with_constructed_kernel_reproduces_sum_modes_shared_path() {
        // 1x1 kernel: identity on the Fs half, zeros on the F1 half
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let c = 3;
        let mut w = vec![0.0; c * 2 * c];
        for k in 0..c {
            w[k * 2 * c + c + k] = 1.0; // pick channel c+k (the Fs half)
        }
        let w1 = Tensor::from_vec(w.clone(), &[c, 2 * c, 1, 1]).unwrap();
        let w2 = Tensor::from_vec(w, &[c, 2 * c, 1, 1]).unwrap();
        let merge = MergeSpec::Concat1x1 { w1, w2 };
        let f1 = rand_tensor(&mut rng, &[2, c, 5, 5]);
        let fs = rand_tensor(&mut rng, &[2, c, 5, 5]);
        let merged = merge.merge(&f1, &fs, 1).unwrap();
        for (a, b) in merged.to_vec().iter().zip(fs.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn head_merge_sum_is_f_plus_fs() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let f1 = rand_tensor(&mut rng, &[1, 2, 3, 3]);
        let fs = rand_tensor(&mut rng, &[1, 2, 3, 3]);
        let f2 = rand_tensor(&mut rng, &[1, 2, 3, 3]);
        let triple = FeatureTriple {
            f1: f1.clone(),
            fs: fs.clone(),
            f2: f2.clone(),
        };
        let (t1, t2) = head_merge(&triple, &MergeSpec::Sum).unwrap();
        for ((a, b), c) in t1.to_vec().iter().zip(f1.to_vec()).zip(fs.to_vec()) {
            assert!((a - (b + c)).abs() < 1e-12);
        }
        for ((a, b), c) in t2.to_vec().iter().zip(f2.to_vec()).zip(fs.to_vec()) {
            assert!((a - (b + c)).abs() < 1e-12);
        }
    }
}
