//! `safl`: the loop-closure pipeline as file-to-file subcommands.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | other failure |
//! | 2 | invalid command line or configuration |
//! | 3 | I/O failure |
//! | 4 | malformed input file (frame, pose, binary format or version) |
//! | 5 | shape or dimension mismatch between artifacts |
//! | 6 | training diverged (non-finite loss) |
//! | 7 | evaluation impossible (no positives, degenerate labels, missing pose) |

mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use commands::FeatureKind;
use config::{ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "safl", version, about = "LiDAR loop-closure detection with dual BiGAN features")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; SAFL_CONFIG takes precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Upper bound on worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Output directory (file for `infer`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted loops.
    Synth,
    /// Build voxel grids and top views from a dataset.
    Extract {
        #[arg(long)]
        input: PathBuf,
    },
    /// Train both branches on extracted maps.
    Train {
        #[arg(long)]
        input: PathBuf,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Encode maps into a feature file.
    Infer {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = FeatureKind::Mix)]
        features: FeatureKind,
    },
    /// Sequence-match queries against references.
    Match {
        #[arg(long)]
        input: PathBuf,
    },
    /// Score match files against ground-truth poses.
    Eval {
        /// `name=matches.csv`, repeatable.
        #[arg(long, required = true)]
        input: Vec<String>,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long, default_value = "sad")]
        baseline: String,
        /// Label of the noise setting in the summary table.
        #[arg(long, default_value = "default")]
        setting: String,
    },
    /// Redraw PR and ROC charts from an evaluation directory.
    Plot {
        #[arg(long)]
        input: PathBuf,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<safl_core::Error>() {
            use safl_core::Error as E;
            return match e {
                E::InvalidConfig(_) => 2,
                E::Io(_) => 3,
                E::MalformedFrame { .. } | E::MalformedPose { .. } | E::Format { .. } | E::FormatVersionMismatch { .. } => 4,
                E::ShapeMismatch(_) | E::DimensionMismatch { .. } => 5,
                E::NonFiniteLoss { .. } => 6,
                E::NoPositives | E::DegenerateLabels | E::MissingPose(_) => 7,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    let path = std::env::var_os("SAFL_CONFIG").map(PathBuf::from).or(cli.common.config);
    let mut cfg = RunConfig::load(path.as_deref())?;
    if let Some(s) = cli.common.seed {
        cfg.set_seed(s);
    }
    let out = |default: &str| cli.common.out.clone().unwrap_or_else(|| PathBuf::from(default));
    match cli.command {
        Command::Synth => commands::synth(&cfg, &out("dataset")),
        Command::Extract { input } => commands::extract(&cfg, &input, &out("maps")),
        Command::Train { input, resume } => commands::train(&cfg, &input, &out("model"), resume, cli.common.jobs),
        Command::Infer { input, model, features } => {
            commands::infer(&cfg, &input, model.as_deref(), features, &out("features.bin"))
        }
        Command::Match { input } => commands::match_features(&cfg, &input, &out("matches")),
        Command::Eval { input, poses, baseline, setting } => {
            let named: Vec<_> = input.iter().map(|s| commands::parse_named(s)).collect();
            commands::eval(&cfg, &named, &poses, &baseline, &setting, &out("report"))
        }
        Command::Plot { input } => commands::plot(&input, &out("plots")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
