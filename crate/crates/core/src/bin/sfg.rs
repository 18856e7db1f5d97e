//! Command-line entry point: training runs, grouping analysis, activation
//! export, the initialisation sweep and the duplicated-task probe.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use sfg_core::analysis;
use sfg_core::checkpoint;
use sfg_core::config::ExperimentConfig;
use sfg_core::data::{self, DatasetKind};
use sfg_core::train;
use sfg_core::zoo::Model;

#[derive(Parser)]
#[command(name = "sfg", version, about = "Stochastic filter grouping experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a TOML config and write run artifacts.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory (default: <output_dir>/<baseline>-seed<seed>).
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write proportions/trajectory CSVs from a run's snapshots.
    AnalyzeGrouping {
        #[arg(long)]
        run_dir: PathBuf,
        /// Output directory (default: <run_dir>/analysis).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export per-kernel activation maps from a checkpointed run.
    Activations {
        #[arg(long)]
        run_dir: PathBuf,
        /// Entropy quantile marking "confident" kernels.
        #[arg(long, default_value_t = 0.2)]
        quantile: f64,
        /// Output directory (default: <run_dir>/activations).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the four grouping-initialisation schemes and compare them.
    InitSweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare a genuine task pair against a duplicated single task.
    DuplicateTask {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a freshly generated held-out set.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Monte-Carlo passes (default: value from the config).
        #[arg(long)]
        passes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a dataset file (and optional PNG previews).
    GenData {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long, default_value_t = 1024)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Write PNG previews of the first N images next to the output.
        #[arg(long, default_value_t = 0)]
        preview: usize,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum KindArg {
    Faces,
    Scans,
}

impl From<KindArg> for DatasetKind {
    fn from(k: KindArg) -> DatasetKind {
        match k {
            KindArg::Faces => DatasetKind::Faces,
            KindArg::Scans => DatasetKind::Scans,
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> sfg_core::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> sfg_core::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| sfg_core::Error::io(dir.display().to_string(), e))
}

fn default_run_dir(cfg: &ExperimentConfig, stem: &str) -> PathBuf {
    cfg.output_dir
        .join(format!("{stem}-seed{}", cfg.train.seed))
}

fn dispatch(cli: Cli) -> sfg_core::Result<()> {
    match cli.cmd {
        Cmd::Train {
            config,
            run_dir,
            seed,
        } => {
            let cfg = load_config(&config, seed)?;
            let dir = run_dir.unwrap_or_else(|| default_run_dir(&cfg, cfg.train.baseline.name()));
            ensure_dir(&dir)?;
            let out = train::run(&cfg.train)?;
            cfg.save(&dir.join("config.toml"))?;
            train::write_step_log(&out.records, &dir.join("steps.csv"))?;
            analysis::write_snapshots(&out.snapshots, &dir.join("snapshots.json"))?;
            checkpoint::save(&out.model.params(), &dir.join("checkpoint.sfgc"))?;
            analysis::write_json(&out.eval, &dir.join("eval.json"))?;
            println!("run written to {}", dir.display());
            println!("{}", serde_json::to_string_pretty(&out.eval).unwrap_or_default());
            Ok(())
        }
        Cmd::AnalyzeGrouping { run_dir, out } => {
            let snaps = analysis::read_snapshots(&run_dir.join("snapshots.json"))?;
            let dir = out.unwrap_or_else(|| run_dir.join("analysis"));
            ensure_dir(&dir)?;
            analysis::write_proportions_csv(&snaps, &dir.join("proportions.csv"))?;
            analysis::write_trajectory_csv(&snaps, &dir.join("trajectory.csv"))?;
            println!("analysis written to {}", dir.display());
            Ok(())
        }
        Cmd::Activations {
            run_dir,
            quantile,
            out,
            seed,
        } => {
            let cfg = load_config(&run_dir.join("config.toml"), seed)?;
            let model = Model::new(&cfg.train.arch, cfg.train.baseline, cfg.train.seed)?;
            let params = model.params();
            let entries = checkpoint::load(&run_dir.join("checkpoint.sfgc"))?;
            checkpoint::restore(&params, &entries)?;
            let kind = cfg.train.arch.dataset_kind();
            let ds = data::generate(
                kind,
                cfg.train.batch_size.max(2),
                cfg.train.image_size,
                cfg.train.image_size,
                cfg.train.seed.wrapping_add(0x5eed),
            )?;
            let indices: Vec<usize> = (0..ds.n).collect();
            let batch = ds.batch(&indices)?;
            let tau = cfg.train.temp.temperature(cfg.train.steps);
            let dir = out.unwrap_or_else(|| run_dir.join("activations"));
            ensure_dir(&dir)?;
            analysis::export_activation_maps(
                &model,
                &batch.images,
                quantile,
                tau,
                cfg.train.seed,
                &dir,
            )?;
            println!("activation maps written to {}", dir.display());
            Ok(())
        }
        Cmd::InitSweep {
            config,
            run_dir,
            seed,
        } => {
            let cfg = load_config(&config, seed)?;
            let dir = run_dir.unwrap_or_else(|| default_run_dir(&cfg, "init-sweep"));
            ensure_dir(&dir)?;
            let results = analysis::init_sweep(&cfg.train)?;
            analysis::write_sweep_csv(&results, &dir.join("sweep.csv"))?;
            let divergence = analysis::sweep_divergence(&results);
            #[derive(serde::Serialize)]
            struct SweepReport {
                divergence: f64,
                results: Vec<analysis::SweepResult>,
            }
            analysis::write_json(
                &SweepReport {
                    divergence,
                    results,
                },
                &dir.join("sweep.json"),
            )?;
            println!("sweep written to {} (divergence {divergence:.4})", dir.display());
            Ok(())
        }
        Cmd::DuplicateTask {
            config,
            run_dir,
            seed,
        } => {
            let cfg = load_config(&config, seed)?;
            let dir = run_dir.unwrap_or_else(|| default_run_dir(&cfg, "duplicate-task"));
            ensure_dir(&dir)?;
            let report = analysis::duplicate_task_probe(&cfg.train)?;
            analysis::write_json(&report, &dir.join("duplicate_report.json"))?;
            println!(
                "two-task shared fraction {:.4}, duplicated {:.4}; report in {}",
                report.two_task.shared_fraction,
                report.duplicated.shared_fraction,
                dir.display()
            );
            Ok(())
        }
        Cmd::Eval {
            config,
            checkpoint: ck,
            passes,
            seed,
            out,
        } => {
            let cfg = load_config(&config, seed)?;
            let model = Model::new(&cfg.train.arch, cfg.train.baseline, cfg.train.seed)?;
            let params = model.params();
            let entries = checkpoint::load(&ck)?;
            checkpoint::restore(&params, &entries)?;
            let kind = cfg.train.arch.dataset_kind();
            let ds = data::generate(
                kind,
                cfg.train.n_val,
                cfg.train.image_size,
                cfg.train.image_size,
                cfg.train.seed.wrapping_add(0x5eed),
            )?;
            let tau = cfg.train.temp.temperature(cfg.train.steps);
            let mut rng = <rand_chacha::ChaCha20Rng as rand::SeedableRng>::seed_from_u64(
                cfg.train.seed,
            );
            let report = train::evaluate(
                &model,
                &ds,
                tau,
                passes.unwrap_or(cfg.train.mc_passes),
                cfg.train.batch_size,
                &mut rng,
            )?;
            let text = serde_json::to_string_pretty(&report)
                .map_err(|e| sfg_core::Error::Format(e.to_string()))?;
            println!("{text}");
            if let Some(p) = out {
                analysis::write_json(&report, &p)?;
            }
            Ok(())
        }
        Cmd::GenData {
            kind,
            n,
            size,
            seed,
            out,
            preview,
        } => {
            let ds = data::generate(kind.into(), n, size, size, seed)?;
            data::save(&ds, &out)?;
            for i in 0..preview.min(n) {
                let p = out.with_extension(format!("{i}.png"));
                analysis::save_image_png(&ds, i, &p)?;
            }
            println!("wrote {} items to {}", n, out.display());
            Ok(())
        }
    }
}
