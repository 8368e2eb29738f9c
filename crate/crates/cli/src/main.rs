//! `diti <subcommand> --config path [--out dir]`
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use diti_core::pipeline::{self, ExperimentConfig, GenerateMode, Stage, StageOptions};
use diti_core::DitiError;

#[derive(Parser)]
#[command(name = "diti", version, about = "Disentangled representations from diffusion time-steps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Interpolate,
    Manipulate,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset.
    GenData(Common),
    /// Train the denoiser.
    TrainDm(Common),
    /// Train the encoder/decoder against a frozen denoiser.
    TrainDiti {
        #[command(flatten)]
        common: Common,
        /// Denoiser checkpoint (default: <out>/dm.ckpt).
        #[arg(long)]
        dm: Option<PathBuf>,
    },
    /// Attribute-loss curves, loss times and dominance checks.
    VerifyTheory(Common),
    /// Linear probes and subset alignment.
    Probe {
        #[command(flatten)]
        common: Common,
        /// Encoder/decoder checkpoint (default: <out>/diti.ckpt).
        #[arg(long)]
        diti: Option<PathBuf>,
    },
    /// Counterfactual interpolation or classifier-driven manipulation.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "interpolate")]
        mode: Mode,
        #[arg(long)]
        dm: Option<PathBuf>,
        #[arg(long)]
        diti: Option<PathBuf>,
    },
    /// Aggregate stage outputs into acceptance_summary.csv.
    Report(Common),
    /// Run every stage in order.
    All(Common),
    /// Write the reference config to --config.
    InitConfig {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<DitiError> for Failure {
    fn from(e: DitiError) -> Self {
        match e {
            DitiError::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn stage(s: Stage, common: &Common, opts: StageOptions) -> Result<(), Failure> {
    let cfg = load(common)?;
    let outcome = pipeline::run_stage(s, &cfg, &opts)?;
    println!(
        "{} complete in {:.1}s -> {}",
        s.name(),
        outcome.seconds,
        cfg.output_dir.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let none = StageOptions::default;
    match cli.command {
        Command::GenData(c) => stage(Stage::GenData, &c, none()),
        Command::TrainDm(c) => stage(Stage::TrainDm, &c, none()),
        Command::TrainDiti { common, dm } => stage(Stage::TrainDiti, &common, StageOptions { dm, ..none() }),
        Command::VerifyTheory(c) => stage(Stage::VerifyTheory, &c, none()),
        Command::Probe { common, diti } => stage(Stage::Probe, &common, StageOptions { diti, ..none() }),
        Command::Generate { common, mode, dm, diti } => {
            let mode = Some(match mode {
                Mode::Interpolate => GenerateMode::Interpolate,
                Mode::Manipulate => GenerateMode::Manipulate,
            });
            stage(Stage::Generate, &common, StageOptions { dm, diti, mode })
        }
        Command::Report(c) => stage(Stage::Report, &c, none()),
        Command::All(c) => {
            let cfg = load(&c)?;
            for o in pipeline::run_all(&cfg)? {
                println!("{} complete in {:.1}s", o.manifest.stage, o.seconds);
            }
            Ok(())
        }
        Command::InitConfig { config, seed, out } => {
            let cfg = ExperimentConfig::reference(seed, out);
            std::fs::write(&config, cfg.to_json() + "\n")
                .map_err(|e| Failure::Runtime(format!("{}: {e}", config.display())))?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
