//! Command line front end for the DoA experiment pipeline.
//!
//! Stages run in order: `simulate`, `features`, `train`, `infer`,
//! `evaluate` or `sweep`, then `report`. Each stage reads and writes the
//! shared run directory; running one without its prerequisite fails with a
//! message naming the stage to run first.
//!
//! Global flags may also come from environment variables with the
//! `DOANET_` prefix: `DOANET_CONFIG`, `DOANET_STAGE_DIR`, `DOANET_SEED`,
//! `DOANET_MODEL`, `DOANET_THRESHOLD`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric divergence during training.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use doanet::config::{ModelKind, RunConfig};
use doanet::error::{Error, Result};
use doanet::pipeline;

#[derive(Parser)]
#[command(name = "doanet", version, about = "Multi-source direction-of-arrival estimation")]
struct Cli {
    /// TOML configuration file; defaults reproduce the full-scale setup.
    #[arg(long, global = true, env = "DOANET_CONFIG")]
    config: Option<PathBuf>,

    /// Directory holding all stage artifacts.
    #[arg(long, global = true, env = "DOANET_STAGE_DIR", default_value = "run")]
    stage_dir: PathBuf,

    /// Overrides the dataset seed from the config.
    #[arg(long, global = true, env = "DOANET_SEED")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Miso,
    Mimo,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Miso => ModelKind::Miso,
            ModelArg::Mimo => ModelKind::Mimo,
        }
    }
}

#[derive(Args)]
struct ModelOpt {
    /// Which model variant to operate on.
    #[arg(long, value_enum, env = "DOANET_MODEL")]
    model: ModelArg,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the seeded dataset: rooms, sources, multichannel audio.
    Simulate,
    /// Compute input features, SPS label tensors and VAD metadata.
    Features,
    /// Train one model variant and write its best checkpoint.
    Train(ModelOpt),
    /// Run a trained model over the test split and cache its outputs.
    Infer {
        #[command(flatten)]
        model: ModelOpt,
    },
    /// Score cached outputs at one threshold.
    Evaluate {
        #[command(flatten)]
        model: ModelOpt,
        /// Detection threshold in (0, 1); defaults to the config value.
        #[arg(long, env = "DOANET_THRESHOLD")]
        threshold: Option<f64>,
    },
    /// Score cached outputs across the whole 0.1..0.9 threshold grid.
    Sweep(ModelOpt),
    /// Combine evaluate and sweep artifacts into a Markdown comparison.
    Report,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.dataset.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    cfg.validate()?;
    let root = cli.stage_dir.as_path();
    match &cli.command {
        Command::Simulate => {
            let manifest = pipeline::run_simulate(&cfg, root)?;
            println!(
                "simulated {} utterances under {} (config {})",
                manifest.entries.len(),
                root.join("dataset").display(),
                manifest.config_hash
            );
        }
        Command::Features => {
            pipeline::run_features(&cfg, root)?;
            println!("features and labels cached under {}", root.join("features").display());
        }
        Command::Train(opt) => {
            let kind: ModelKind = opt.model.into();
            let outcome = pipeline::run_train(&cfg, root, kind)?;
            match outcome.best_score {
                Some(f1) => println!(
                    "trained {kind}: best epoch {} with validation F1 {:.4} (loss {:.6})",
                    outcome.best_epoch, f1, outcome.best_val_loss
                ),
                None => println!(
                    "trained {kind}: best epoch {} with validation loss {:.6}",
                    outcome.best_epoch, outcome.best_val_loss
                ),
            }
        }
        Command::Infer { model } => {
            let kind: ModelKind = model.model.into();
            let index = pipeline::run_infer(&cfg, root, kind)?;
            println!("inferred {} test utterances with {kind}", index.entries.len());
        }
        Command::Evaluate { model, threshold } => {
            let kind: ModelKind = model.model.into();
            let threshold = threshold.unwrap_or(cfg.eval.threshold);
            if !(threshold > 0.0 && threshold < 1.0) {
                return Err(Error::Config("--threshold must lie in (0, 1)".into()));
            }
            let rows = pipeline::run_evaluate(&cfg, root, kind, threshold)?;
            print!("{}", doanet::eval::score_csv_string(&rows));
        }
        Command::Sweep(opt) => {
            let kind: ModelKind = opt.model.into();
            let rows = pipeline::run_sweep(&cfg, root, kind)?;
            print!("{}", doanet::eval::score_csv_string(&rows));
        }
        Command::Report => {
            let md = pipeline::run_report(&cfg, root)?;
            print!("{md}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
