//! Training loop: Adam, the step/eval orchestration, step logging and
//! Monte-Carlo inference with the annealed sampling temperature.

use std::io::Write as IoWrite;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::concrete::TempSchedule;
use crate::data::{self, Batch, BatchStream, DatasetKind, SynthDataset};
use crate::objective::{self, LossValues};
use crate::tensor::Tensor;
use crate::zoo::{ArchSpec, BaselineKind, Model};
use crate::{Error, Result};

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_lambda1() -> f64 {
    objective::DEFAULT_LAMBDA1
}
fn default_lambda2() -> f64 {
    objective::DEFAULT_LAMBDA2
}
fn default_batch() -> usize {
    16
}
fn default_steps() -> u64 {
    2000
}
fn default_n_train() -> usize {
    4096
}
fn default_n_val() -> usize {
    256
}
fn default_image_size() -> usize {
    32
}
fn default_grad_samples() -> usize {
    1
}
fn default_mc_passes() -> usize {
    50
}
fn default_log_every() -> u64 {
    10
}
fn default_snapshot_every() -> u64 {
    100
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: ArchSpec,
    pub baseline: BaselineKind,
    pub seed: u64,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_val")]
    pub n_val: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_lambda1")]
    pub lambda1: f64,
    #[serde(default = "default_lambda2")]
    pub lambda2: f64,
    #[serde(default)]
    pub temp: TempSchedule,
    #[serde(default = "default_mc_passes")]
    pub mc_passes: usize,
    /// Assignment draws averaged per gradient step (multi-sample
    /// Monte-Carlo estimator); only useful for stochastic groupings.
    #[serde(default = "default_grad_samples")]
    pub grad_samples: usize,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: u64,
    /// Straight-through hard sampling during training (off by default;
    /// the relaxed sample is the estimator of record).
    #[serde(default)]
    pub hard_assignments: bool,
    /// Override of the learned grouping initialisation; only meaningful
    /// for the `sfg` baseline.
    #[serde(default)]
    pub grouping_init: Option<GroupingInit>,
    /// Load the training set from a dataset file instead of generating
    /// it; the last `n_val` items become the held-out split.
    #[serde(default)]
    pub dataset_path: Option<std::path::PathBuf>,
}

/// Initialisation of the learned grouping distributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingInit {
    /// Every kernel starts at the same point of the simplex.
    Constant([f64; 3]),
    /// Each kernel starts at an independent uniform (Dirichlet(1,1,1))
    /// draw from the simplex.
    Dirichlet,
}

impl TrainConfig {
    pub fn new(arch: ArchSpec, baseline: BaselineKind, seed: u64) -> TrainConfig {
        TrainConfig {
            arch,
            baseline,
            seed,
            n_train: default_n_train(),
            n_val: default_n_val(),
            image_size: default_image_size(),
            batch_size: default_batch(),
            steps: default_steps(),
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            lambda1: default_lambda1(),
            lambda2: default_lambda2(),
            temp: TempSchedule::default(),
            mc_passes: default_mc_passes(),
            grad_samples: default_grad_samples(),
            log_every: default_log_every(),
            snapshot_every: default_snapshot_every(),
            hard_assignments: false,
            grouping_init: None,
            dataset_path: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Invalid(
                "batch_size must be >= 2 (batch-statistics normalisation)".into(),
            ));
        }
        if self.n_train < self.batch_size {
            return Err(Error::Invalid(format!(
                "n_train ({}) must be >= batch_size ({})",
                self.n_train, self.batch_size
            )));
        }
        if self.image_size < 16 {
            return Err(Error::Invalid("image_size must be >= 16".into()));
        }
        if self.mc_passes == 0 {
            return Err(Error::Invalid("mc_passes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction. State is positionally aligned with the
/// parameter list it was built for.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Adam {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// Apply one update from the accumulated gradients, then clear them.
    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Invalid(format!(
                "Adam state for {} params, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter().enumerate() {
            let Some(g) = p.grad() else { continue };
            let mut d = p.to_vec();
            for (j, gj) in g.iter().enumerate() {
                self.m[i][j] = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * gj;
                self.v[i][j] = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * gj * gj;
                let mhat = self.m[i][j] / bc1;
                let vhat = self.v[i][j] / bc2;
                d[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.set_data(d)?;
            p.zero_grad();
        }
        Ok(())
    }
}

/// One logged training step.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub step: u64,
    pub tau: f64,
    pub losses: LossValues,
}

/// Grouping distribution snapshot for analysis tooling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupingSnapshot {
    pub step: u64,
    pub tau: f64,
    /// per layer, per kernel: (p_task1, p_shared, p_task2)
    pub layers: Vec<Vec<[f64; 3]>>,
    /// per layer: class-wise column sums (expected group sizes)
    pub sums: Vec<[f64; 3]>,
    /// per layer, per kernel: assignment entropy
    pub entropies: Vec<Vec<f64>>,
}

pub(crate) fn snapshot(model: &Model, step: u64, tau: f64) -> Result<GroupingSnapshot> {
    let layers: Vec<Vec<[f64; 3]>> = model
        .layers
        .iter()
        .map(|l| Ok(l.grouping.prob_rows()?))
        .collect::<Result<_>>()?;
    let sums = layers
        .iter()
        .map(|rows| {
            let mut s = [0.0; 3];
            for r in rows {
                for g in 0..3 {
                    s[g] += r[g];
                }
            }
            s
        })
        .collect();
    let entropies = layers
        .iter()
        .map(|rows| rows.iter().map(crate::concrete::entropy_of_row).collect())
        .collect();
    Ok(GroupingSnapshot {
        step,
        tau,
        layers,
        sums,
        entropies,
    })
}

/// Held-out metrics; Dice is only meaningful for segmentation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalReport {
    pub reg_mae: f64,
    pub reg_psnr: f64,
    /// None when task 2 is a duplicated regression task.
    pub cls_accuracy: Option<f64>,
    pub seg_dice: Option<f64>,
    /// Task-2 regression error in duplicate-task mode.
    pub reg2_mae: Option<f64>,
}

pub struct RunOutput {
    pub model: Model,
    pub records: Vec<StepRecord>,
    pub snapshots: Vec<GroupingSnapshot>,
    pub eval: EvalReport,
    pub final_tau: f64,
}

pub fn mae(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / pred.len().max(1) as f64
}

/// Peak signal-to-noise ratio in dB, capped at 99.0.
pub fn psnr(mse: f64, range: f64) -> f64 {
    if mse <= 0.0 {
        return 99.0;
    }
    (10.0 * (range * range / mse).log10()).min(99.0)
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / pred.len().max(1) as f64
}

/// Hard Dice overlap averaged over classes; an absent class with an empty
/// prediction counts as perfect overlap.
pub fn dice_score(pred: &[usize], labels: &[usize], num_classes: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..num_classes {
        let mut inter = 0usize;
        let mut pc = 0usize;
        let mut lc = 0usize;
        for (p, l) in pred.iter().zip(labels) {
            let pi = (*p == c) as usize;
            let li = (*l == c) as usize;
            inter += pi & li;
            pc += pi;
            lc += li;
        }
        total += if pc + lc == 0 {
            1.0
        } else {
            2.0 * inter as f64 / (pc + lc) as f64
        };
    }
    total / num_classes as f64
}

fn task_nlls(
    out1: &Tensor,
    out2: &Tensor,
    batch: &Batch,
    duplicate: bool,
) -> Result<(Tensor, Tensor)> {
    let target = batch.reg_target()?;
    let nll1 = objective::nll_regression(out1, &target)?;
    let nll2 = if duplicate {
        objective::nll_regression(out2, &target)?
    } else {
        match batch.kind {
            DatasetKind::Faces => objective::nll_classification(out2, &batch.cls)?,
            DatasetKind::Scans => objective::dice_ce(out2, &batch.cls)?,
        }
    };
    Ok((nll1, nll2))
}

/// One optimisation step on the given batch; returns the loss components.
pub fn train_step(
    model: &Model,
    ds: &SynthDataset,
    indices: &[usize],
    tau: f64,
    adam: &mut Adam,
    params: &[Tensor],
    cfg: &TrainConfig,
    rng: &mut ChaCha20Rng,
) -> Result<LossValues> {
    let batch = ds.batch(indices)?;
    let samples = cfg.grad_samples.max(1);
    let mut nll1_sum: Option<Tensor> = None;
    let mut nll2_sum: Option<Tensor> = None;
    for _ in 0..samples {
        let asg = model.sample_assignments(tau, rng, cfg.hard_assignments)?;
        let (out1, out2) = model.forward(&batch.images, &asg)?;
        let (n1, n2) = task_nlls(&out1, &out2, &batch, model.spec.duplicate_tasks)?;
        nll1_sum = Some(match nll1_sum {
            Some(acc) => acc.add(&n1)?,
            None => n1,
        });
        nll2_sum = Some(match nll2_sum {
            Some(acc) => acc.add(&n2)?,
            None => n2,
        });
    }
    // With one draw the sums are the raw NLL tensors, so the default
    // path is bitwise-identical to single-sample training.
    let (mut nll1, mut nll2) = (nll1_sum.unwrap(), nll2_sum.unwrap());
    if samples > 1 {
        nll1 = nll1.mul_scalar(1.0 / samples as f64)?;
        nll2 = nll2.mul_scalar(1.0 / samples as f64)?;
    }
    let terms = objective::assemble(
        nll1,
        nll2,
        &model.sfg_layers(),
        cfg.lambda1,
        cfg.lambda2,
        ds.n,
        indices.len(),
    )?;
    let values = terms.values();
    terms.total.backward()?;
    adam.step(params)?;
    Ok(values)
}

/// Monte-Carlo predictions: mean over passes for regression, per-sample
/// (or per-pixel) majority vote for classification.
pub struct McPrediction {
    pub reg: Vec<f64>,
    pub cls: Vec<usize>,
    /// Task-2 regression mean in duplicate-task mode.
    pub reg2: Option<Vec<f64>>,
}

pub fn mc_infer(
    model: &Model,
    images: &Tensor,
    tau: f64,
    passes: usize,
    rng: &mut ChaCha20Rng,
) -> Result<McPrediction> {
    if passes == 0 {
        return Err(Error::Invalid("mc_infer needs at least one pass".into()));
    }
    let duplicate = model.spec.duplicate_tasks;
    let mut reg_sum: Vec<f64> = Vec::new();
    let mut reg2_sum: Vec<f64> = Vec::new();
    let mut first_reg: Vec<f64> = Vec::new();
    let mut first_reg2: Vec<f64> = Vec::new();
    let mut all_passes_equal = true;
    let mut votes: Vec<Vec<usize>> = Vec::new();
    for _ in 0..passes {
        let asg = model.sample_assignments(tau, rng, false)?;
        let (out1, out2) = model.forward(images, &asg)?;
        let r = out1.to_vec();
        if reg_sum.is_empty() {
            reg_sum = vec![0.0; r.len()];
            first_reg = r.clone();
        } else if all_passes_equal {
            all_passes_equal = first_reg.iter().zip(&r).all(|(a, b)| a.to_bits() == b.to_bits());
        }
        for (acc, v) in reg_sum.iter_mut().zip(&r) {
            *acc += v;
        }
        if duplicate {
            let r2 = out2.to_vec();
            if reg2_sum.is_empty() {
                reg2_sum = vec![0.0; r2.len()];
                first_reg2 = r2.clone();
            } else if all_passes_equal {
                all_passes_equal =
                    first_reg2.iter().zip(&r2).all(|(a, b)| a.to_bits() == b.to_bits());
            }
            for (acc, v) in reg2_sum.iter_mut().zip(&r2) {
                *acc += v;
            }
            continue;
        }
        let num_classes = out2.shape()[1];
        let pred = if out2.shape().len() == 2 {
            out2.argmax_rows()?
        } else {
            out2.argmax_channels()?
        };
        if votes.is_empty() {
            votes = vec![vec![0; num_classes]; pred.len()];
        }
        for (v, p) in votes.iter_mut().zip(pred) {
            v[p] += 1;
        }
    }
    // If every pass produced the same outputs (frozen one-hot assignments)
    // return the single-pass values unchanged: dividing an n-fold sum can
    // differ from the addends in the last ulp.
    let reg = if all_passes_equal {
        first_reg
    } else {
        reg_sum.iter().map(|v| v / passes as f64).collect()
    };
    let cls = votes
        .iter()
        .map(|v| {
            v.iter()
                .enumerate()
                .max_by_key(|(_, c)| **c)
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect();
    let reg2 = if duplicate {
        Some(if all_passes_equal {
            first_reg2
        } else {
            reg2_sum.iter().map(|v| v / passes as f64).collect()
        })
    } else {
        None
    };
    Ok(McPrediction { reg, cls, reg2 })
}

/// Evaluate on the whole dataset in batches.
pub fn evaluate(
    model: &Model,
    ds: &SynthDataset,
    tau: f64,
    passes: usize,
    batch_size: usize,
    rng: &mut ChaCha20Rng,
) -> Result<EvalReport> {
    let duplicate = model.spec.duplicate_tasks;
    let mut preds = Vec::new();
    let mut preds2 = Vec::new();
    let mut reg_true = Vec::new();
    let mut cls_pred = Vec::new();
    let mut cls_true = Vec::new();
    let mut i = 0;
    while i < ds.n {
        let hi = (i + batch_size).min(ds.n);
        if hi - i < 2 {
            break; // batch statistics need at least two rows
        }
        let indices: Vec<usize> = (i..hi).collect();
        let batch = ds.batch(&indices)?;
        let mc = mc_infer(model, &batch.images, tau, passes, rng)?;
        preds.extend(mc.reg);
        reg_true.extend(batch.reg.iter().copied());
        if let Some(r2) = mc.reg2 {
            preds2.extend(r2);
        } else {
            cls_pred.extend(mc.cls);
            cls_true.extend(batch.cls.iter().copied());
        }
        i = hi;
    }
    let mse = preds
        .iter()
        .zip(&reg_true)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / preds.len().max(1) as f64;
    let seg_dice = match (duplicate, ds.kind) {
        (false, DatasetKind::Scans) => Some(dice_score(&cls_pred, &cls_true, ds.num_classes())),
        _ => None,
    };
    Ok(EvalReport {
        reg_mae: mae(&preds, &reg_true),
        reg_psnr: psnr(mse, ds.reg_range()),
        cls_accuracy: (!duplicate).then(|| accuracy(&cls_pred, &cls_true)),
        seg_dice,
        reg2_mae: duplicate.then(|| mae(&preds2, &reg_true)),
    })
}

/// Full experiment: generate data, train, evaluate.
pub fn run(cfg: &TrainConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let kind = cfg.arch.dataset_kind();
    let (train_ds, val_ds) = match &cfg.dataset_path {
        Some(path) => {
            let full = data::load(path)?;
            if full.kind != kind {
                return Err(Error::Invalid(format!(
                    "{}: dataset kind {:?} does not match the architecture",
                    path.display(),
                    full.kind
                )));
            }
            if full.n <= cfg.n_val {
                return Err(Error::Invalid(format!(
                    "{}: {} items cannot cover n_val = {}",
                    path.display(),
                    full.n,
                    cfg.n_val
                )));
            }
            full.split_at(full.n - cfg.n_val)?
        }
        None => (
            data::generate(kind, cfg.n_train, cfg.image_size, cfg.image_size, cfg.seed)?,
            data::generate(
                kind,
                cfg.n_val,
                cfg.image_size,
                cfg.image_size,
                cfg.seed.wrapping_add(0x5eed),
            )?,
        ),
    };
    let mut model = Model::new(&cfg.arch, cfg.baseline, cfg.seed)?;
    if let Some(init) = cfg.grouping_init {
        if cfg.baseline != BaselineKind::Sfg {
            return Err(Error::Invalid(
                "grouping_init only applies to the sfg baseline".into(),
            ));
        }
        let mut init_rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0xD1B1C); // simplex draws
        for layer in &mut model.layers {
            let k = layer.num_kernels();
            layer.grouping = match init {
                GroupingInit::Constant(p) => crate::concrete::GroupingParams::learned(k, p)?,
                GroupingInit::Dirichlet => {
                    use rand::Rng;
                    let rows: Vec<[f64; 3]> = (0..k)
                        .map(|_| {
                            let e: [f64; 3] = std::array::from_fn(|_| {
                                -(init_rng.gen::<f64>().clamp(1e-12, 1.0)).ln()
                            });
                            let s = e[0] + e[1] + e[2];
                            [e[0] / s, e[1] / s, e[2] / s]
                        })
                        .collect();
                    crate::concrete::GroupingParams::learned_rows(&rows)?
                }
            };
        }
    }
    let model = model;
    let params = model.trainable();
    let mut adam = Adam::new(&params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    if train_ds.n < cfg.batch_size {
        return Err(Error::Invalid(format!(
            "training split has {} items, need at least batch_size ({})",
            train_ds.n, cfg.batch_size
        )));
    }
    let mut stream = BatchStream::new(train_ds.n, cfg.batch_size, cfg.seed ^ 0x9e37);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed.wrapping_mul(0x2545F4914F6CDD1D));
    let mut records = Vec::new();
    let mut snapshots = vec![snapshot(&model, 0, cfg.temp.temperature(0))?];
    let mut final_tau = cfg.temp.temperature(0);
    for step in 0..cfg.steps {
        let tau = cfg.temp.temperature(step);
        final_tau = tau;
        let indices = stream.next_batch();
        let losses = train_step(&model, &train_ds, &indices, tau, &mut adam, &params, cfg, &mut rng)?;
        if !losses.total.is_finite() {
            return Err(Error::Invalid(format!(
                "non-finite loss at step {step}: {losses:?}"
            )));
        }
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            records.push(StepRecord { step, tau, losses });
        }
        if cfg.snapshot_every > 0 && (step + 1) % cfg.snapshot_every == 0 {
            snapshots.push(snapshot(&model, step + 1, tau)?);
        }
    }
    let eval = evaluate(
        &model,
        &val_ds,
        final_tau,
        cfg.mc_passes,
        cfg.batch_size,
        &mut rng,
    )?;
    Ok(RunOutput {
        model,
        records,
        snapshots,
        eval,
        final_tau,
    })
}

/// Write the step log as CSV.
pub fn write_step_log(records: &[StepRecord], path: &Path) -> Result<()> {
    let mut f =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let io = |e| Error::io(path.display().to_string(), e);
    writeln!(f, "step,tau,nll1,nll2,weight_l2,entropy_sum,total").map_err(io)?;
    for r in records {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.step,
            r.tau,
            r.losses.nll_task1,
            r.losses.nll_task2,
            r.losses.weight_l2,
            r.losses.entropy_sum,
            r.losses.total
        )
        .map_err(io)?;
    }
    Ok(())
}
