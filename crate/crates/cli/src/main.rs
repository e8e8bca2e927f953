use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dna_cli::commands::{self, TrainArgs};
use dna_cli::{CliError, RunConfig};
use dna_core::ensemble::EnsembleKind;

/// Diversified neural-network ensembles for 1-D signals: data generation,
/// sequential training, adversarial attacks and evaluation.
#[derive(Parser)]
#[command(name = "dna", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the dataset manifest, signal files and train/test split.
    GenerateData {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to <output_dir>/data.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the three arms of one ensemble.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        kind: EnsembleKind,
        /// Defaults to <output_dir>/ensembles/<kind>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset directory; defaults to <output_dir>/data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Copy arm 0 from this ensemble directory instead of retraining it.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Retrain only this arm, keeping the earlier ones on disk.
        #[arg(long)]
        arm: Option<usize>,
        /// Overwrite existing arm files.
        #[arg(long)]
        force: bool,
    },
    /// Craft attacked sets against arm 0 for every (family, ε) grid cell.
    Attack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ensemble_dir: PathBuf,
        /// Defaults to <output_dir>/attacks.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score ensembles on natural and attacked sets.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// One ensemble directory, or a directory of them.
        #[arg(long)]
        ensemble_dir: PathBuf,
        #[arg(long)]
        attacks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::GenerateData { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let out = out.unwrap_or_else(|| commands::default_data_dir(&cfg));
            commands::generate_data(&cfg, &out)
        }
        Cmd::Train {
            config,
            kind,
            out,
            data,
            base,
            arm,
            force,
        } => {
            let cfg = RunConfig::load(&config)?;
            let out = out.unwrap_or_else(|| commands::default_ensemble_dir(&cfg, kind));
            let data = data.unwrap_or_else(|| commands::default_data_dir(&cfg));
            commands::train(
                &cfg,
                &TrainArgs {
                    kind,
                    data_dir: &data,
                    out: &out,
                    base: base.as_deref(),
                    only_arm: arm,
                    force,
                },
            )
        }
        Cmd::Attack {
            config,
            ensemble_dir,
            out,
            data,
        } => {
            let cfg = RunConfig::load(&config)?;
            let out = out.unwrap_or_else(|| commands::default_attack_dir(&cfg));
            let data = data.unwrap_or_else(|| commands::default_data_dir(&cfg));
            commands::attack(&cfg, &data, &ensemble_dir, &out)
        }
        Cmd::Evaluate {
            config,
            ensemble_dir,
            attacks,
            out,
            data,
        } => {
            let cfg = RunConfig::load(&config)?;
            let data = data.unwrap_or_else(|| commands::default_data_dir(&cfg));
            commands::evaluate(&cfg, &data, &ensemble_dir, &attacks, &out).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
