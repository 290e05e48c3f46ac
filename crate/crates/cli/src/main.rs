//! `zsla`: dataset generation, detector training, synthesis, evaluation,
//! GZSL and noise sweeps from the command line.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use zsla_core::detector::Pooling;
use zsla_core::pipeline::{Logger, PipelineConfig, PipelineError, ThresholdMode};

/// Zero-shot attribute detector synthesis on a controlled synthetic dataset.
#[derive(Debug, Parser)]
#[command(name = "zsla", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root (overrides the config's output_dir).
    #[arg(long, global = true, env = "ZSLA_OUT")]
    out: Option<PathBuf>,
    /// Run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PoolingArg {
    Lg,
    Max,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the dataset: manifest, features and labels.
    GenData {
        /// Also write labels corrupted at this wrong-attribute-label rate.
        #[arg(long)]
        walr: Option<f64>,
    },
    /// Train the seen attribute detectors.
    TrainSeen {
        /// Drop the uni-modal constraint.
        #[arg(long)]
        no_umc: bool,
        /// Pooling used by the training loss.
        #[arg(long, value_enum)]
        pooling: Option<PoolingArg>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the intersection network on the seen detectors.
    TrainDnr {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Extract base attributes and assemble the unseen detectors.
    Synthesize,
    /// Score every bank on the held-out scenes.
    Evaluate {
        /// Skip training the direct reference bank.
        #[arg(long)]
        no_direct: bool,
    },
    /// Annotate the dataset and run ESZSL on annotated and manual labels.
    Gzsl {
        /// One threshold per seen attribute instead of a pooled one.
        #[arg(long)]
        per_attribute: bool,
    },
    /// Full pipeline at several noise levels with confidence intervals.
    Sweep {
        /// Comma-separated noise levels.
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<f64>>,
        #[arg(long)]
        runs: Option<usize>,
        /// Concurrent runs (0: one per core).
        #[arg(long)]
        workers: Option<usize>,
    },
}

impl Command {
    fn apply(&self, cfg: &mut PipelineConfig) {
        match self {
            Command::GenData { walr } => {
                if let Some(w) = walr {
                    cfg.walr = *w;
                }
            }
            Command::TrainSeen {
                no_umc,
                pooling,
                epochs,
            } => {
                if *no_umc {
                    cfg.detector.umc = false;
                }
                if let Some(p) = pooling {
                    cfg.detector.pooling = match p {
                        PoolingArg::Lg => Pooling::LocationGuided,
                        PoolingArg::Max => Pooling::Max,
                    };
                }
                if let Some(e) = epochs {
                    cfg.detector.epochs = *e;
                }
            }
            Command::TrainDnr { epochs } => {
                if let Some(e) = epochs {
                    cfg.synthesis.epochs = *e;
                }
            }
            Command::Synthesize => {}
            Command::Evaluate { no_direct } => {
                if *no_direct {
                    cfg.evaluation.direct_reference = false;
                }
            }
            Command::Gzsl { per_attribute } => {
                if *per_attribute {
                    cfg.evaluation.threshold_mode = ThresholdMode::PerAttribute;
                }
            }
            Command::Sweep { levels, runs, workers } => {
                if let Some(l) = levels {
                    cfg.sweep.levels = l.clone();
                }
                if let Some(r) = runs {
                    cfg.sweep.runs = *r;
                }
                if let Some(w) = workers {
                    cfg.sweep.workers = *w;
                }
            }
        }
    }
}

/// Base configuration: the `--config` file, else the configuration recorded
/// by `gen-data` under the output root, else defaults. Flags are applied on
/// top.
fn effective_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let g = &cli.global;
    let mut cfg = match &g.config {
        Some(path) => PipelineConfig::load(path)?,
        None => {
            let root = g.out.clone().unwrap_or_else(|| PipelineConfig::default().output_dir);
            let recorded = commands::data_dir(&root).join(commands::CONFIG_FILE);
            if recorded.exists() {
                PipelineConfig::load(&recorded)?
            } else {
                PipelineConfig::default()
            }
        }
    };
    if let Some(out) = &g.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cli.command.apply(&mut cfg);
    let cfg = cfg.with_stage_seeds();
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli, log: &Logger) -> Result<(), PipelineError> {
    let cfg = effective_config(cli)?;
    match &cli.command {
        Command::GenData { .. } => commands::gen_data(&cfg, log),
        Command::TrainSeen { .. } => commands::train_seen(&cfg, log),
        Command::TrainDnr { .. } => commands::train_dnr(&cfg, log),
        Command::Synthesize => commands::synthesize(&cfg, log),
        Command::Evaluate { .. } => commands::evaluate(&cfg, log),
        Command::Gzsl { .. } => commands::gzsl(&cfg, log),
        Command::Sweep { .. } => commands::sweep(&cfg, log),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let log = Logger::new(cli.global.quiet);
    match run(&cli, &log) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log.error("failed", &[("reason", &e)]);
            ExitCode::FAILURE
        }
    }
}
