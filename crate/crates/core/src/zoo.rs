//! Model zoo: two reduced multi-task architectures built from SFG
//! convolution sites, plus the baseline grouping regimes.
//!
//! Every baseline is expressed as a grouping regime over the same trunk,
//! so comparisons hold the architecture and parameter shapes fixed:
//! frozen one-hot rows recover deterministic wiring (single-task, hard
//! sharing, fixed masks) while the full method learns its distribution.

use std::cell::RefCell;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::concrete::{gsm_sample, AssignmentSample, GroupingParams};
use crate::data::DatasetKind;
use crate::sfg::{head_merge, route, sfg_forward_routed, FeatureTriple, MergeSpec, SfgLayer};
use crate::tensor::{Result as TResult, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    /// VGG-ish trunk for the faces dataset: 3x3 convs with max-pooling,
    /// global average pooling, affine heads (scalar regression + binary
    /// classification).
    ToyVgg,
    /// Dense trunk for the scans dataset: 3x3 convs at full resolution,
    /// residual blocks on the inter-layer routes, 1x1 conv heads (dense
    /// regression + 3-class segmentation).
    ToyHighRes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Frozen halves: first half of every bank is task-1, second half task-2.
    SingleTask,
    /// Every kernel frozen to the shared group.
    HardSharing,
    /// Frozen round-robin one-hot assignment (task1, shared, task2, ...).
    ConstantMask,
    /// Frozen uniform distribution; sampling stays stochastic.
    ConstantP,
    /// Single-task wiring plus learnable scalar mixing of the two task
    /// activations after every transform.
    CrossStitch,
    /// Learned grouping distributions (the full method).
    Sfg,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 6] = [
        BaselineKind::SingleTask,
        BaselineKind::HardSharing,
        BaselineKind::ConstantMask,
        BaselineKind::ConstantP,
        BaselineKind::CrossStitch,
        BaselineKind::Sfg,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::SingleTask => "single_task",
            BaselineKind::HardSharing => "hard_sharing",
            BaselineKind::ConstantMask => "constant_mask",
            BaselineKind::ConstantP => "constant_p",
            BaselineKind::CrossStitch => "cross_stitch",
            BaselineKind::Sfg => "sfg",
        }
    }
}

/// Initial grouping probability for learned regimes.
pub const P_INIT: [f64; 3] = [0.2, 0.6, 0.2];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchSpec {
    pub arch: ArchKind,
    /// Multiplies every layer width; 1 is the desk-scale default.
    pub width_scale: usize,
    /// Give task 2 the same regression target as task 1 (the duplicated
    /// pair probe); the task-2 head then mirrors the task-1 head.
    #[serde(default)]
    pub duplicate_tasks: bool,
}

impl ArchSpec {
    pub fn toy_vgg(width_scale: usize) -> ArchSpec {
        ArchSpec {
            arch: ArchKind::ToyVgg,
            width_scale,
            duplicate_tasks: false,
        }
    }

    pub fn toy_highres(width_scale: usize) -> ArchSpec {
        ArchSpec {
            arch: ArchKind::ToyHighRes,
            width_scale,
            duplicate_tasks: false,
        }
    }

    /// Kernel counts of the four SFG sites.
    pub fn widths(&self) -> Vec<usize> {
        let base: [usize; 4] = match self.arch {
            ArchKind::ToyVgg => [8, 16, 32, 32],
            ArchKind::ToyHighRes => [8, 8, 8, 8],
        };
        base.iter().map(|w| w * self.width_scale.max(1)).collect()
    }

    pub fn dataset_kind(&self) -> DatasetKind {
        match self.arch {
            ArchKind::ToyVgg => DatasetKind::Faces,
            ArchKind::ToyHighRes => DatasetKind::Scans,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.arch {
            ArchKind::ToyVgg => 2,
            ArchKind::ToyHighRes => 3,
        }
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen::<f64>().clamp(1e-12, 1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn he_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Result<Tensor> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Ok(Tensor::param(
        (0..n).map(|_| std * normal(rng)).collect(),
        shape,
    )?)
}

/// Batch normalisation with affine parameters. Normalisation always uses
/// the statistics of the current batch; exponential running statistics are
/// tracked as a diagnostic but never normalise anything.
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: RefCell<Vec<f64>>,
    pub running_var: RefCell<Vec<f64>>,
}

const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm {
    pub fn new(channels: usize) -> Result<BatchNorm> {
        Ok(BatchNorm {
            gamma: Tensor::param(vec![1.0; channels], &[channels])?,
            beta: Tensor::param(vec![0.0; channels], &[channels])?,
            running_mean: RefCell::new(vec![0.0; channels]),
            running_var: RefCell::new(vec![1.0; channels]),
        })
    }

    pub fn apply(&self, x: &Tensor) -> TResult<Tensor> {
        self.track(x);
        x.batch_norm(&self.gamma, &self.beta)
    }

    fn track(&self, x: &Tensor) {
        let c = self.gamma.numel();
        let shape = x.shape();
        if shape.len() < 2 || shape[1] != c {
            return;
        }
        let inner: usize = shape[2..].iter().product();
        let b = shape[0];
        let m = (b * inner) as f64;
        if m < 2.0 {
            return;
        }
        let d = x.data();
        let mut rm = self.running_mean.borrow_mut();
        let mut rv = self.running_var.borrow_mut();
        for ch in 0..c {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for bi in 0..b {
                let base = (bi * c + ch) * inner;
                for i in 0..inner {
                    let v = d[base + i];
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / m;
            let var = (sq / m - mean * mean).max(0.0);
            rm[ch] = (1.0 - BN_MOMENTUM) * rm[ch] + BN_MOMENTUM * mean;
            rv[ch] = (1.0 - BN_MOMENTUM) * rv[ch] + BN_MOMENTUM * var;
        }
    }
}

/// Pre-activation residual block, channel-preserving 3x3 convs.
pub struct ResBlock {
    pub bn1: BatchNorm,
    pub slope1: Tensor,
    pub w1: Tensor,
    pub bn2: BatchNorm,
    pub slope2: Tensor,
    pub w2: Tensor,
}

impl ResBlock {
    fn new<R: Rng>(channels: usize, rng: &mut R) -> Result<ResBlock> {
        let fan = channels * 9;
        Ok(ResBlock {
            bn1: BatchNorm::new(channels)?,
            slope1: Tensor::param(vec![0.25; channels], &[channels])?,
            w1: he_normal(rng, &[channels, channels, 3, 3], fan)?,
            bn2: BatchNorm::new(channels)?,
            slope2: Tensor::param(vec![0.25; channels], &[channels])?,
            w2: he_normal(rng, &[channels, channels, 3, 3], fan)?,
        })
    }

    pub fn apply(&self, x: &Tensor) -> TResult<Tensor> {
        let y = self.bn1.apply(x)?.prelu(&self.slope1)?.conv2d(&self.w1, 1, 1)?;
        let y = self.bn2.apply(&y)?.prelu(&self.slope2)?.conv2d(&self.w2, 1, 1)?;
        x.add(&y)
    }
}

/// The inter-layer transform h applied on each route.
pub enum Junction {
    /// Shared BN -> PReLU (-> optional 2x2 max-pool); Sum merge.
    BnPrelu {
        bn: BatchNorm,
        slope: Tensor,
        pool: bool,
    },
    /// Per-branch residual blocks; Concat1x1 merge on the task routes.
    Residual {
        r1: ResBlock,
        rs: ResBlock,
        r2: ResBlock,
        merge: MergeSpec,
    },
}

/// The two prediction heads on top of the merged task features.
pub enum Head {
    /// BN -> PReLU -> global average pool -> per-task affine maps.
    Gap {
        bn: BatchNorm,
        slope: Tensor,
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
    },
    /// BN -> PReLU -> per-task 1x1 convs at full resolution.
    Dense {
        bn: BatchNorm,
        slope: Tensor,
        w1: Tensor,
        w2: Tensor,
    },
}

/// One cross-stitch mixing site: x1' = s1·x1 + c1·x2, x2' = s2·x2 + c2·x1.
pub struct StitchUnit {
    pub self1: Tensor,
    pub cross1: Tensor,
    pub self2: Tensor,
    pub cross2: Tensor,
}

impl StitchUnit {
    fn new() -> Result<StitchUnit> {
        let s = |v: f64| Tensor::param(vec![v], &[1]);
        Ok(StitchUnit {
            self1: s(0.9)?,
            cross1: s(0.1)?,
            self2: s(0.9)?,
            cross2: s(0.1)?,
        })
    }

    pub fn apply(&self, x1: &Tensor, x2: &Tensor) -> Result<(Tensor, Tensor)> {
        let y1 = x1.scale_by(&self.self1)?.add(&x2.scale_by(&self.cross1)?)?;
        let y2 = x2.scale_by(&self.self2)?.add(&x1.scale_by(&self.cross2)?)?;
        Ok((y1, y2))
    }
}

fn grouping_for(baseline: BaselineKind, k: usize) -> Result<GroupingParams> {
    const T1: [f64; 3] = [1.0, 0.0, 0.0];
    const SH: [f64; 3] = [0.0, 1.0, 0.0];
    const T2: [f64; 3] = [0.0, 0.0, 1.0];
    let rows: Vec<[f64; 3]> = match baseline {
        BaselineKind::SingleTask | BaselineKind::CrossStitch => (0..k)
            .map(|i| if i < k.div_ceil(2) { T1 } else { T2 })
            .collect(),
        BaselineKind::HardSharing => vec![SH; k],
        BaselineKind::ConstantMask => (0..k).map(|i| [T1, SH, T2][i % 3]).collect(),
        BaselineKind::ConstantP => vec![[1.0 / 3.0; 3]; k],
        BaselineKind::Sfg => return Ok(GroupingParams::learned(k, P_INIT)?),
    };
    Ok(GroupingParams::frozen(&rows)?)
}

/// Full-bank activations of one layer, for inspection tooling.
pub struct LayerActivations {
    /// Detached conv outputs of the three route inputs [B, K, H, W].
    pub full: [Tensor; 3],
    /// Group index each kernel was routed to in this pass.
    pub groups: Vec<usize>,
}

pub struct Model {
    pub spec: ArchSpec,
    pub baseline: BaselineKind,
    pub layers: Vec<SfgLayer>,
    pub junctions: Vec<Junction>,
    pub head: Head,
    pub stitches: Vec<StitchUnit>,
}

impl Model {
    pub fn new(spec: &ArchSpec, baseline: BaselineKind, seed: u64) -> Result<Model> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let widths = spec.widths();
        let mut layers = Vec::with_capacity(widths.len());
        let mut cin = 1;
        for &k in &widths {
            let kernels = he_normal(&mut rng, &[k, cin, 3, 3], cin * 9)?;
            layers.push(SfgLayer::new(kernels, grouping_for(baseline, k)?, 1, 1)?);
            cin = k;
        }
        let mut junctions = Vec::new();
        for j in 0..widths.len() - 1 {
            let c = widths[j];
            let junction = match spec.arch {
                ArchKind::ToyVgg => Junction::BnPrelu {
                    bn: BatchNorm::new(c)?,
                    slope: Tensor::param(vec![0.25; c], &[c])?,
                    pool: true,
                },
                ArchKind::ToyHighRes => {
                    if j < 2 {
                        Junction::Residual {
                            r1: ResBlock::new(c, &mut rng)?,
                            rs: ResBlock::new(c, &mut rng)?,
                            r2: ResBlock::new(c, &mut rng)?,
                            merge: MergeSpec::Concat1x1 {
                                w1: he_normal(&mut rng, &[c, 2 * c, 1, 1], 2 * c)?,
                                w2: he_normal(&mut rng, &[c, 2 * c, 1, 1], 2 * c)?,
                            },
                        }
                    } else {
                        Junction::BnPrelu {
                            bn: BatchNorm::new(c)?,
                            slope: Tensor::param(vec![0.25; c], &[c])?,
                            pool: false,
                        }
                    }
                }
            };
            junctions.push(junction);
        }
        let c = *widths.last().unwrap();
        let t2 = if spec.duplicate_tasks {
            1
        } else {
            spec.num_classes()
        };
        let head = match spec.arch {
            ArchKind::ToyVgg => Head::Gap {
                bn: BatchNorm::new(c)?,
                slope: Tensor::param(vec![0.25; c], &[c])?,
                w1: he_normal(&mut rng, &[c, 1], c)?,
                b1: Tensor::param(vec![0.0], &[1])?,
                w2: he_normal(&mut rng, &[c, t2], c)?,
                b2: Tensor::param(vec![0.0; t2], &[t2])?,
            },
            ArchKind::ToyHighRes => Head::Dense {
                bn: BatchNorm::new(c)?,
                slope: Tensor::param(vec![0.25; c], &[c])?,
                w1: he_normal(&mut rng, &[1, c, 1, 1], c)?,
                w2: he_normal(&mut rng, &[t2, c, 1, 1], c)?,
            },
        };
        let stitches = if baseline == BaselineKind::CrossStitch {
            (0..widths.len()).map(|_| StitchUnit::new()).collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Model {
            spec: spec.clone(),
            baseline,
            layers,
            junctions,
            head,
            stitches,
        })
    }

    pub fn sfg_layers(&self) -> Vec<&SfgLayer> {
        self.layers.iter().collect()
    }

    /// Draw one assignment per layer at temperature `tau`.
    pub fn sample_assignments<R: Rng>(
        &self,
        tau: f64,
        rng: &mut R,
        hard: bool,
    ) -> Result<Vec<AssignmentSample>> {
        self.layers
            .iter()
            .map(|l| Ok(gsm_sample(&l.grouping, tau, rng, hard)?))
            .collect()
    }

    pub fn forward(
        &self,
        images: &Tensor,
        assignments: &[AssignmentSample],
    ) -> Result<(Tensor, Tensor)> {
        let (t1, t2, _) = self.forward_impl(images, assignments, false)?;
        Ok((t1, t2))
    }

    /// Forward pass that also captures the detached full-bank activations
    /// of every layer.
    pub fn forward_with_activations(
        &self,
        images: &Tensor,
        assignments: &[AssignmentSample],
    ) -> Result<(Tensor, Tensor, Vec<LayerActivations>)> {
        let (t1, t2, acts) = self.forward_impl(images, assignments, true)?;
        Ok((t1, t2, acts))
    }

    fn forward_impl(
        &self,
        images: &Tensor,
        assignments: &[AssignmentSample],
        capture: bool,
    ) -> Result<(Tensor, Tensor, Vec<LayerActivations>)> {
        if assignments.len() != self.layers.len() {
            return Err(Error::Invalid(format!(
                "got {} assignment samples for {} layers",
                assignments.len(),
                self.layers.len()
            )));
        }
        let mut acts = Vec::new();
        let mut rf = sfg_forward_routed(&self.layers[0], images, images, images, &assignments[0])?;
        if capture {
            acts.push(LayerActivations {
                full: [rf.full[0].detach(), rf.full[1].detach(), rf.full[2].detach()],
                groups: assignments[0].group_of()?,
            });
        }
        for (j, junction) in self.junctions.iter().enumerate() {
            let (mut in1, ins, mut in2) = self.apply_junction(junction, &rf.triple)?;
            if let Some(st) = self.stitches.get(j) {
                (in1, in2) = st.apply(&in1, &in2)?;
            }
            rf = sfg_forward_routed(&self.layers[j + 1], &in1, &ins, &in2, &assignments[j + 1])?;
            if capture {
                acts.push(LayerActivations {
                    full: [rf.full[0].detach(), rf.full[1].detach(), rf.full[2].detach()],
                    groups: assignments[j + 1].group_of()?,
                });
            }
        }
        let (mut t1, mut t2) = head_merge(&rf.triple, &MergeSpec::Sum)?;
        if let Some(st) = self.stitches.last() {
            if self.stitches.len() == self.layers.len() {
                (t1, t2) = st.apply(&t1, &t2)?;
            }
        }
        let (out1, out2) = self.apply_head(&t1, &t2)?;
        Ok((out1, out2, acts))
    }

    fn apply_junction(
        &self,
        junction: &Junction,
        triple: &FeatureTriple,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        match junction {
            Junction::BnPrelu { bn, slope, pool } => {
                let h = |t: &Tensor| -> TResult<Tensor> {
                    let y = bn.apply(t)?.prelu(slope)?;
                    if *pool { y.max_pool2d(2, 2) } else { Ok(y) }
                };
                Ok(route(triple, &MergeSpec::Sum, h, h, h)?)
            }
            Junction::Residual { r1, rs, r2, merge } => Ok(route(
                triple,
                merge,
                |t| r1.apply(t),
                |t| rs.apply(t),
                |t| r2.apply(t),
            )?),
        }
    }

    fn apply_head(&self, t1: &Tensor, t2: &Tensor) -> Result<(Tensor, Tensor)> {
        match &self.head {
            Head::Gap {
                bn,
                slope,
                w1,
                b1,
                w2,
                b2,
            } => {
                let g1 = bn.apply(t1)?.prelu(slope)?.global_avg_pool()?;
                let g2 = bn.apply(t2)?.prelu(slope)?.global_avg_pool()?;
                Ok((
                    g1.matmul(w1)?.add_rowvec(b1)?,
                    g2.matmul(w2)?.add_rowvec(b2)?,
                ))
            }
            Head::Dense { bn, slope, w1, w2 } => {
                let g1 = bn.apply(t1)?.prelu(slope)?;
                let g2 = bn.apply(t2)?.prelu(slope)?;
                Ok((g1.conv2d(w1, 1, 0)?, g2.conv2d(w2, 1, 0)?))
            }
        }
    }

    /// Named parameter registry in a stable order.
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let push_bn = |out: &mut Vec<(String, Tensor)>, prefix: &str, bn: &BatchNorm| {
            out.push((format!("{prefix}.gamma"), bn.gamma.clone()));
            out.push((format!("{prefix}.beta"), bn.beta.clone()));
        };
        let push_res = |out: &mut Vec<(String, Tensor)>, prefix: &str, r: &ResBlock| {
            push_bn(out, &format!("{prefix}.bn1"), &r.bn1);
            out.push((format!("{prefix}.prelu1"), r.slope1.clone()));
            out.push((format!("{prefix}.conv1"), r.w1.clone()));
            push_bn(out, &format!("{prefix}.bn2"), &r.bn2);
            out.push((format!("{prefix}.prelu2"), r.slope2.clone()));
            out.push((format!("{prefix}.conv2"), r.w2.clone()));
        };
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.kernels"), layer.kernels.clone()));
            if let Some(logits) = layer.grouping.logits() {
                out.push((format!("layers.{i}.logits"), logits.clone()));
            }
        }
        for (j, junction) in self.junctions.iter().enumerate() {
            match junction {
                Junction::BnPrelu { bn, slope, .. } => {
                    push_bn(&mut out, &format!("junctions.{j}.bn"), bn);
                    out.push((format!("junctions.{j}.prelu"), slope.clone()));
                }
                Junction::Residual { r1, rs, r2, merge } => {
                    push_res(&mut out, &format!("junctions.{j}.task1"), r1);
                    push_res(&mut out, &format!("junctions.{j}.shared"), rs);
                    push_res(&mut out, &format!("junctions.{j}.task2"), r2);
                    if let MergeSpec::Concat1x1 { w1, w2 } = merge {
                        out.push((format!("junctions.{j}.merge.w1"), w1.clone()));
                        out.push((format!("junctions.{j}.merge.w2"), w2.clone()));
                    }
                }
            }
        }
        match &self.head {
            Head::Gap {
                bn,
                slope,
                w1,
                b1,
                w2,
                b2,
            } => {
                push_bn(&mut out, "head.bn", bn);
                out.push(("head.prelu".into(), slope.clone()));
                out.push(("head.task1.w".into(), w1.clone()));
                out.push(("head.task1.b".into(), b1.clone()));
                out.push(("head.task2.w".into(), w2.clone()));
                out.push(("head.task2.b".into(), b2.clone()));
            }
            Head::Dense { bn, slope, w1, w2 } => {
                push_bn(&mut out, "head.bn", bn);
                out.push(("head.prelu".into(), slope.clone()));
                out.push(("head.task1.w".into(), w1.clone()));
                out.push(("head.task2.w".into(), w2.clone()));
            }
        }
        for (i, st) in self.stitches.iter().enumerate() {
            out.push((format!("stitch.{i}.self1"), st.self1.clone()));
            out.push((format!("stitch.{i}.cross1"), st.cross1.clone()));
            out.push((format!("stitch.{i}.self2"), st.self2.clone()));
            out.push((format!("stitch.{i}.cross2"), st.cross2.clone()));
        }
        out
    }

    /// Trainable tensors (everything in the registry; frozen groupings
    /// expose no tensor at all).
    pub fn trainable(&self) -> Vec<Tensor> {
        self.params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }
}
