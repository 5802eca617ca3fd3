//! `dynseg`: generate synthetic scenes, train, infer, evaluate, sweep the
//! clustering radius and run the numeric self-checks.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "dynseg", version, about)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML file with any subset of the run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for scene-level parallelism (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Clustering radius in meters [default: d_min / 4]
    #[arg(long, global = true, value_parser = positive_f64)]
    radius: Option<f64>,
    /// Voxel cells per axis for the filter generator [default: 14]
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..=64))]
    grid: Option<u64>,
    /// Mask feature width [default: 16]
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..=256))]
    mask_dim: Option<u64>,
    /// Decoder layer count [default: 3]
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..=16))]
    layers: Option<u64>,
    /// NMS IoU threshold [default: 0.3]
    #[arg(long, global = true, value_parser = unit_interval)]
    nms_iou: Option<f64>,
    /// Smallest reported cluster [default: 50, synthetic scenes 10]
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    min_cluster: Option<u64>,
}

/// Selects a contiguous range of the sorted scene files.
#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Directory of `.scene` files.
    #[arg(long)]
    pub data: PathBuf,
    /// Skip this many scenes (sorted by name).
    #[arg(long, default_value_t = 0)]
    pub skip: usize,
    /// Use at most this many scenes.
    #[arg(long)]
    pub take: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset.
    Gen {
        /// Number of scenes.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        scenes: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        walls: bool,
        #[arg(long, value_parser = positive_f64)]
        d_min: Option<f64>,
    },
    /// Train a model; writes `model.ckpt`, `loss_curve.jsonl` and `config.json`.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long, value_parser = positive_f64)]
        lr: Option<f64>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        batch: Option<u64>,
    },
    /// Predict instances; writes `predictions.jsonl` and `config.json`.
    Infer {
        #[command(flatten)]
        data: DataArgs,
        /// Training output directory.
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Use ground-truth semantics and offsets instead of a model.
        #[arg(long, conflicts_with = "checkpoint")]
        oracle: bool,
        /// Gaussian noise on oracle offsets, meters.
        #[arg(long, default_value_t = 0.0, requires = "oracle", value_parser = non_negative_f64)]
        offset_noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth; writes a JSON report.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate metrics, cluster count and purity across radii.
    SweepRadius {
        #[command(flatten)]
        data: DataArgs,
        /// Training output directory; oracle inputs when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Radii in meters [default: 0.25, 0.5, 0.75 times d_min]
        #[arg(long, value_delimiter = ',', value_parser = positive_f64)]
        radii: Vec<f64>,
        #[arg(long, default_value_t = 0.0, value_parser = non_negative_f64)]
        offset_noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of every loss and module.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 1e-5, value_parser = positive_f64)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-4, value_parser = positive_f64)]
        tolerance: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Oracle-equivalence suites.
    Selfcheck {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn positive_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a positive number, got `{s}`")),
    }
}

fn non_negative_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a non-negative number, got `{s}`")),
    }
}

fn unit_interval(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v <= 1.0 => Ok(v),
        _ => Err(format!("expected a value in (0, 1], got `{s}`")),
    }
}

/// Failure classes mapped to exit codes.
pub enum Failure {
    /// Inconsistent configuration: exit 2.
    Usage(anyhow::Error),
    /// Runtime error: exit 1.
    Runtime(anyhow::Error),
    /// Checks ran but some exceeded tolerance: exit 1.
    Tolerance(Vec<String>),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<dynseg::Error> for Failure {
    fn from(e: dynseg::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn effective_config(g: &GlobalArgs) -> anyhow::Result<RunConfig> {
    let o = Overrides {
        seed: g.seed,
        radius: g.radius,
        grid: g.grid.map(|v| v as usize),
        mask_dim: g.mask_dim.map(|v| v as usize),
        layers: g.layers.map(|v| v as usize),
        nms_iou: g.nms_iou,
        min_cluster: g.min_cluster.map(|v| v as usize),
    };
    let cfg = RunConfig::load(g.config.as_deref())?.apply(&o);
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    if cli.global.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.global.jobs)
            .build_global()
            .map_err(|e| Failure::Runtime(e.into()))?;
    }
    let mut cfg = effective_config(&cli.global).map_err(Failure::Usage)?;
    match cli.command {
        Command::Gen {
            scenes,
            out,
            walls,
            d_min,
        } => {
            cfg.scene.walls |= walls;
            if let Some(d) = d_min {
                cfg.scene.d_min = d;
            }
            cfg.validate().map_err(Failure::Usage)?;
            commands::gen(&cfg, scenes as usize, &out)
        }
        Command::Train {
            data,
            out,
            steps,
            warmup,
            lr,
            batch,
        } => {
            let t = &mut cfg.train;
            t.steps = steps.unwrap_or(t.steps);
            t.warmup_steps = warmup.unwrap_or(t.warmup_steps.min(t.steps));
            t.lr = lr.unwrap_or(t.lr);
            t.batch_scenes = batch.map_or(t.batch_scenes, |b| b as usize);
            cfg.validate().map_err(Failure::Usage)?;
            commands::train(&cfg, &data, &out)
        }
        Command::Infer {
            data,
            checkpoint,
            oracle: _,
            offset_noise,
            out,
        } => commands::infer(&cfg, &data, checkpoint.as_deref(), offset_noise, &out),
        Command::Eval {
            data,
            predictions,
            out,
        } => {
            if predictions == out {
                return Err(Failure::Usage(anyhow::anyhow!(
                    "--out would overwrite --predictions"
                )));
            }
            commands::eval(&cfg, &data, &predictions, &out)
        }
        Command::SweepRadius {
            data,
            checkpoint,
            radii,
            offset_noise,
            out,
        } => commands::sweep_radius(
            &cfg,
            &data,
            checkpoint.as_deref(),
            &radii,
            offset_noise,
            &out,
        ),
        Command::GradCheck {
            instances,
            epsilon,
            tolerance,
            out,
        } => {
            if instances == 0 || !(1e-7..=1e-3).contains(&epsilon) {
                return Err(Failure::Usage(anyhow::anyhow!(
                    "need at least one instance and epsilon in [1e-7, 1e-3]"
                )));
            }
            commands::grad_check(instances, epsilon, tolerance, out.as_deref())
        }
        Command::Selfcheck { out } => commands::selfcheck(&cfg, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Tolerance(names)) => {
            eprintln!("failed checks: {}", names.join(", "));
            ExitCode::from(1)
        }
    }
}
