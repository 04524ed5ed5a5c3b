use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use triaug::harness::{
    cmd_compare, cmd_eval, cmd_gen_data, cmd_train, ExperimentConfig, Scorer, CHECKPOINT_DIR, COMPARE_CSV,
    METRICS_CSV,
};
use triaug::Error;

#[derive(Parser)]
#[command(name = "triaug", version, about = "Long-tailed OOD detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the dataset seed (gen-data) or the training seed (train, compare).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes <out>/checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory from gen-data.
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a checkpoint with one or more OOD scorers.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory; defaults to <out>/checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated subset of msp, odin, md, knn.
        #[arg(long, value_delimiter = ',', default_value = "msp,odin,md,knn")]
        scorers: Vec<String>,
    },
    /// Train and evaluate several configs on one dataset.
    Compare {
        /// Repeat for each run. Without any, runs the s1x3, s2x3 and ours
        /// variants of the default config.
        #[arg(long)]
        config: Vec<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Shared dataset; generated from the first config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn load(path: Option<&Path>) -> triaug::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cli: Cli) -> triaug::Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let mut config = load(common.config.as_deref())?;
            if let Some(s) = common.seed {
                config.dataset.seed = s;
            }
            let table = cmd_gen_data(&config, &common.out)?;
            print!("{table}");
            println!("wrote {}", common.out.display());
        }
        Command::Train { common, data } => {
            let mut config = load(common.config.as_deref())?;
            if let Some(s) = common.seed {
                config.training.seed = s;
            }
            let epochs = cmd_train(&config, &data, &common.out)?;
            if let Some(last) = epochs.last() {
                println!(
                    "final epoch {}: L_S1 {:.4}  L_mix {:.4}  L_rmix {:.4}  total {:.4}",
                    last.epoch, last.l_s1, last.l_mix, last.l_rmix, last.total
                );
            }
            println!("wrote {}", common.out.join(CHECKPOINT_DIR).display());
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            scorers,
        } => {
            let config = load(common.config.as_deref())?;
            let scorers = scorers.iter().map(|s| s.parse()).collect::<triaug::Result<Vec<Scorer>>>()?;
            let checkpoint = checkpoint.unwrap_or_else(|| common.out.join(CHECKPOINT_DIR));
            let summary = cmd_eval(&config, &checkpoint, &data, &common.out, &scorers)?;
            for s in &summary.record.scorers {
                println!(
                    "{:<4} tau {:.6}  calibration TPR {:.4}  AUROC {:.4}  FPR@95 {:.4}",
                    s.scorer.name(),
                    s.tau,
                    s.calibration_tpr,
                    s.report.auroc,
                    s.report.fpr_at_95
                );
            }
            println!("wrote {}", common.out.join(METRICS_CSV).display());
        }
        Command::Compare { config, seed, out, data } => {
            let mut configs = if config.is_empty() {
                ExperimentConfig::default().ablation_variants()
            } else {
                config.iter().map(|p| ExperimentConfig::load(p)).collect::<triaug::Result<Vec<_>>>()?
            };
            if let Some(s) = seed {
                for c in &mut configs {
                    c.training.seed = s;
                }
            }
            let table = cmd_compare(&configs, data.as_deref(), &out)?;
            print!("{table}");
            println!("wrote {}", out.join(COMPARE_CSV).display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if matches!(e, Error::Config(_)) {
        2
    } else if e.is_numeric() {
        3
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
