//! Analysis tooling: grouping proportion and trajectory CSVs, activation
//! grids, the initialisation sweep and the duplicated-task probe.

use std::io::Write as IoWrite;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::concrete::{entropy_of_row, GROUP_NAMES};
use crate::data::SynthDataset;
use crate::tensor::Tensor;
use crate::train::{self, EvalReport, GroupingInit, GroupingSnapshot, TrainConfig};
use crate::zoo::{BaselineKind, Model};
use crate::{Error, Result};

fn create(path: &Path) -> Result<std::fs::File> {
    std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path.display().to_string(), e)
}

/// Expected kernel counts per group for one layer: column sums of p.
pub fn group_sums(rows: &[[f64; 3]]) -> [f64; 3] {
    let mut s = [0.0; 3];
    for r in rows {
        for g in 0..3 {
            s[g] += r[g];
        }
    }
    s
}

pub fn write_snapshots(snapshots: &[GroupingSnapshot], path: &Path) -> Result<()> {
    let text =
        serde_json::to_string_pretty(snapshots).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_snapshots(path: &Path) -> Result<Vec<GroupingSnapshot>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let snaps: Vec<GroupingSnapshot> = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if snaps.is_empty() {
        return Err(Error::Format(format!(
            "{}: no snapshots recorded",
            path.display()
        )));
    }
    Ok(snaps)
}

/// `step,layer,sum_p1,sum_ps,sum_p2` — expected group sizes over training.
pub fn write_proportions_csv(snapshots: &[GroupingSnapshot], path: &Path) -> Result<()> {
    let mut f = create(path)?;
    let io = io_at(path);
    writeln!(f, "step,layer,sum_p1,sum_ps,sum_p2").map_err(&io)?;
    for s in snapshots {
        for (l, sums) in s.sums.iter().enumerate() {
            writeln!(f, "{},{},{},{},{}", s.step, l, sums[0], sums[1], sums[2]).map_err(&io)?;
        }
    }
    Ok(())
}

/// `step,layer,kernel,p1,ps,p2` — per-kernel simplex coordinates over
/// training, ready for external ternary plotting.
pub fn write_trajectory_csv(snapshots: &[GroupingSnapshot], path: &Path) -> Result<()> {
    let mut f = create(path)?;
    let io = io_at(path);
    writeln!(f, "step,layer,kernel,p1,ps,p2").map_err(&io)?;
    for s in snapshots {
        for (l, rows) in s.layers.iter().enumerate() {
            for (k, r) in rows.iter().enumerate() {
                writeln!(f, "{},{},{},{},{},{}", s.step, l, k, r[0], r[1], r[2]).map_err(&io)?;
            }
        }
    }
    Ok(())
}

/// Export one PNG per kernel under `out_dir/layer{l}/{group}/`, where the
/// group is the argmax of the kernel's distribution. Kernels at or below
/// the entropy `quantile` within their layer get a `_confident` suffix,
/// the rest `_uncertain`, mirroring a low/high confidence split.
pub fn export_activation_maps(
    model: &Model,
    images: &Tensor,
    quantile: f64,
    tau: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<()> {
    if !(0.0 < quantile && quantile <= 1.0) {
        return Err(Error::Invalid(format!(
            "quantile must be in (0, 1], got {quantile}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let asg = model.sample_assignments(tau, &mut rng, true)?;
    let (_, _, acts) = model.forward_with_activations(images, &asg)?;
    for (l, act) in acts.iter().enumerate() {
        let rows = model.layers[l].grouping.prob_rows()?;
        let ent: Vec<f64> = rows.iter().map(entropy_of_row).collect();
        let mut sorted = ent.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let k = rows.len();
        let cut = sorted[((quantile * k as f64).ceil() as usize).clamp(1, k) - 1];
        let shape = act.full[0].shape().to_vec();
        let (h, w) = (shape[2], shape[3]);
        for g in 0..3 {
            let dir = out_dir.join(format!("layer{l}")).join(GROUP_NAMES[g]);
            std::fs::create_dir_all(&dir)
                .map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
        for (kid, row) in rows.iter().enumerate() {
            let g = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(1);
            let tag = if ent[kid] <= cut { "confident" } else { "uncertain" };
            let map = act.full[g].data();
            let base = kid * h * w; // first batch element
            let slice = &map[base..base + h * w];
            let lo = slice.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = (hi - lo).max(1e-12);
            let bytes: Vec<u8> = slice
                .iter()
                .map(|v| (((v - lo) / span) * 255.0) as u8)
                .collect();
            drop(map);
            let img = image::GrayImage::from_raw(w as u32, h as u32, bytes)
                .ok_or_else(|| Error::Invalid("activation buffer mismatch".into()))?;
            let path = out_dir
                .join(format!("layer{l}"))
                .join(GROUP_NAMES[g])
                .join(format!("kernel{kid:03}_{tag}.png"));
            img.save(&path)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        }
    }
    Ok(())
}

/// The four initialisation schemes probed by the sweep. The first three
/// start from learnable distributions; the fourth is the frozen one-hot
/// round-robin mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepScheme {
    DominantShared,
    DominantTask,
    DirichletRandom,
    OneHotThirds,
}

pub const SWEEP_SCHEMES: [SweepScheme; 4] = [
    SweepScheme::DominantShared,
    SweepScheme::DominantTask,
    SweepScheme::DirichletRandom,
    SweepScheme::OneHotThirds,
];

impl SweepScheme {
    pub fn name(&self) -> &'static str {
        match self {
            SweepScheme::DominantShared => "dominant_shared",
            SweepScheme::DominantTask => "dominant_task",
            SweepScheme::DirichletRandom => "dirichlet_random",
            SweepScheme::OneHotThirds => "one_hot_thirds",
        }
    }

    fn configure(&self, cfg: &mut TrainConfig) {
        match self {
            SweepScheme::DominantShared => {
                cfg.baseline = BaselineKind::Sfg;
                cfg.grouping_init = Some(GroupingInit::Constant([0.2, 0.6, 0.2]));
            }
            SweepScheme::DominantTask => {
                cfg.baseline = BaselineKind::Sfg;
                cfg.grouping_init = Some(GroupingInit::Constant([0.45, 0.1, 0.45]));
            }
            SweepScheme::DirichletRandom => {
                cfg.baseline = BaselineKind::Sfg;
                cfg.grouping_init = Some(GroupingInit::Dirichlet);
            }
            SweepScheme::OneHotThirds => {
                cfg.baseline = BaselineKind::ConstantMask;
                cfg.grouping_init = None;
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub scheme: SweepScheme,
    /// Final expected group sizes per layer.
    pub final_sums: Vec<[f64; 3]>,
    pub eval: EvalReport,
}

/// Train once per initialisation scheme with shared hyperparameters.
pub fn init_sweep(base: &TrainConfig) -> Result<Vec<SweepResult>> {
    SWEEP_SCHEMES
        .iter()
        .map(|scheme| {
            let mut cfg = base.clone();
            scheme.configure(&mut cfg);
            let run = train::run(&cfg)?;
            let final_sums = run
                .model
                .layers
                .iter()
                .map(|l| Ok(group_sums(&l.grouping.prob_rows()?)))
                .collect::<Result<_>>()?;
            Ok(SweepResult {
                scheme: *scheme,
                final_sums,
                eval: run.eval,
            })
        })
        .collect()
}

/// Largest pairwise divergence among the learnable schemes: the max over
/// scheme pairs and layers of the mean absolute difference between the
/// per-layer group fractions.
pub fn sweep_divergence(results: &[SweepResult]) -> f64 {
    let learnable: Vec<&SweepResult> = results
        .iter()
        .filter(|r| r.scheme != SweepScheme::OneHotThirds)
        .collect();
    let mut worst: f64 = 0.0;
    for i in 0..learnable.len() {
        for j in i + 1..learnable.len() {
            for (a, b) in learnable[i].final_sums.iter().zip(&learnable[j].final_sums) {
                let ka: f64 = a.iter().sum();
                let kb: f64 = b.iter().sum();
                let d = (0..3)
                    .map(|g| (a[g] / ka - b[g] / kb).abs())
                    .sum::<f64>()
                    / 3.0;
                worst = worst.max(d);
            }
        }
    }
    worst
}

/// `scheme,layer,sum_p1,sum_ps,sum_p2` of the converged distributions.
pub fn write_sweep_csv(results: &[SweepResult], path: &Path) -> Result<()> {
    let mut f = create(path)?;
    let io = io_at(path);
    writeln!(f, "scheme,layer,sum_p1,sum_ps,sum_p2").map_err(&io)?;
    for r in results {
        for (l, s) in r.final_sums.iter().enumerate() {
            writeln!(f, "{},{},{},{},{}", r.scheme.name(), l, s[0], s[1], s[2]).map_err(&io)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct DuplicateArm {
    pub final_sums: Vec<[f64; 3]>,
    /// Mean probability mass on the shared group across all kernels.
    pub shared_fraction: f64,
    /// Per-layer mean assignment entropy.
    pub mean_entropy: Vec<f64>,
    pub eval: EvalReport,
}

/// Outcome of training the same trunk on a genuine two-task pair versus a
/// duplicated single task.
#[derive(Debug, Clone, Serialize)]
pub struct DuplicateReport {
    pub two_task: DuplicateArm,
    pub duplicated: DuplicateArm,
}

fn arm_from(run: &train::RunOutput) -> Result<DuplicateArm> {
    let mut mass = 0.0;
    let mut count = 0usize;
    let mut final_sums = Vec::new();
    let mut mean_entropy = Vec::new();
    for l in &run.model.layers {
        let rows = l.grouping.prob_rows()?;
        for r in &rows {
            mass += r[1];
        }
        count += rows.len();
        mean_entropy
            .push(rows.iter().map(entropy_of_row).sum::<f64>() / rows.len().max(1) as f64);
        final_sums.push(group_sums(&rows));
    }
    Ok(DuplicateArm {
        final_sums,
        shared_fraction: mass / count.max(1) as f64,
        mean_entropy,
        eval: run.eval,
    })
}

/// Run the duplicated-task probe: identical settings, one arm with the
/// true task pair, one with task 2 replaced by a copy of task 1.
pub fn duplicate_task_probe(base: &TrainConfig) -> Result<DuplicateReport> {
    let mut normal = base.clone();
    normal.baseline = BaselineKind::Sfg;
    normal.arch.duplicate_tasks = false;
    let mut dup = normal.clone();
    dup.arch.duplicate_tasks = true;
    let two_task = arm_from(&train::run(&normal)?)?;
    let duplicated = arm_from(&train::run(&dup)?)?;
    Ok(DuplicateReport {
        two_task,
        duplicated,
    })
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Save one dataset image as a grayscale PNG (for inspection).
pub fn save_image_png(ds: &SynthDataset, index: usize, path: &Path) -> Result<()> {
    if index >= ds.n {
        return Err(Error::Invalid(format!("image index {index} out of range")));
    }
    let hw = ds.h * ds.w;
    let slice = &ds.images[index * hw..(index + 1) * hw];
    let lo = slice.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let bytes: Vec<u8> = slice
        .iter()
        .map(|v| (((v - lo) / span) * 255.0) as u8)
        .collect();
    let img = image::GrayImage::from_raw(ds.w as u32, ds.h as u32, bytes)
        .ok_or_else(|| Error::Invalid("image buffer mismatch".into()))?;
    img.save(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
