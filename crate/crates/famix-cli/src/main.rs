//! Command-line entry point: mine style banks, train, evaluate, run
//! ablation sweeps, re-render reports and generate the synthetic corpus.

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use famix::config::{ExperimentConfig, Profile};
use famix::harness::{self, SweepKind};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "famix",
    version,
    about = "Language-driven local style mining and patch-wise style randomization for domain-generalized semantic segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the hyperparameter profile (desk|paper).
    #[arg(long)]
    profile: Option<String>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut config = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(profile) = &self.profile {
            config.profile = Profile::parse(profile)?;
        }
        if let Some(out) = &self.out {
            config.out_dir = out.clone();
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Mine a class-wise style bank from the training split.
    Mine(RunArgs),
    /// Train a segmentation model per the configured mode and freeze preset.
    Train {
        #[command(flatten)]
        args: RunArgs,
        /// Resume from a checkpoint instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate checkpoints on the configured eval splits.
    Eval {
        #[command(flatten)]
        args: RunArgs,
        /// Checkpoints to evaluate (appended to the config's list).
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Run an ablation sweep: components, prompts, cardinality, freeze,
    /// mixing, noise or global_local.
    Ablate {
        #[command(flatten)]
        args: RunArgs,
        #[arg(long)]
        sweep: String,
    },
    /// Re-render tables and plots from completed ablation outputs.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Generate the synthetic two-domain corpus with manifest and classes.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Mine(args) => {
            let config = args.load()?;
            let outcome = harness::cmd_mine(&config)?;
            println!(
                "bank written to {} ({} entries; per-class counts {:?})",
                outcome.bank_path.display(),
                outcome.log.total_entries,
                outcome.log.per_class_counts
            );
            println!("mining log at {}", outcome.log_path.display());
        }
        Command::Train { args, resume } => {
            let config = args.load()?;
            let outcome = harness::cmd_train(&config, resume.as_deref())?;
            println!(
                "checkpoint written to {} after {} iterations (final loss {:.4})",
                outcome.checkpoint_path.display(),
                outcome.iterations,
                outcome.final_loss
            );
            println!("training log at {}", outcome.log_path.display());
        }
        Command::Eval { args, checkpoints } => {
            let mut config = args.load()?;
            config.checkpoints.extend(checkpoints);
            let outcome = harness::cmd_eval(&config)?;
            for split in &outcome.splits {
                println!(
                    "{}: mIoU {:.2} ± {:.2} over {} run(s)",
                    split.split,
                    100.0 * split.summary.mean_miou,
                    100.0 * split.summary.std_miou,
                    split.summary.runs
                );
            }
            println!("mean over splits: {:.2}", 100.0 * outcome.mean_over_splits);
            println!("reports under {}", config.out_dir.display());
        }
        Command::Ablate { args, sweep } => {
            let config = args.load()?;
            let kind =
                SweepKind::parse(&sweep).with_context(|| format!("unknown sweep `{sweep}`"))?;
            let outcome = harness::cmd_ablate(&config, kind)?;
            for arm in &outcome.arms {
                println!("{}\tmean mIoU {:.2}", arm.name, 100.0 * arm.mean_miou);
            }
            println!("consolidated results at {}", outcome.results_path.display());
            if !outcome.failed.is_empty() {
                return Err(harness::HarnessError::ArmsFailed {
                    failed: outcome.failed.len(),
                    total: outcome.arms.len() + outcome.failed.len(),
                    details: outcome.failed.clone(),
                }
                .into());
            }
        }
        Command::Report { dir } => {
            let rendered = harness::cmd_report(&dir)?;
            for path in rendered {
                println!("rendered {}", path.display());
            }
        }
        Command::Synth { out, seed } => {
            let manifest = harness::cmd_synth(&out, seed)?;
            println!("corpus written; manifest at {}", manifest.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let record = serde_json::json!({
                "error": {
                    "kind": error_kind(&err),
                    "message": format!("{err:#}"),
                }
            });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    use famix::harness::HarnessError;
    if let Some(h) = err.downcast_ref::<HarnessError>() {
        return match h {
            HarnessError::Config(_) => "config",
            HarnessError::Data(_) => "data",
            HarnessError::Mining(_) => "mining",
            HarnessError::Train(_) => "train",
            HarnessError::Eval(_) => "eval",
            HarnessError::Bank(_) => "bank",
            HarnessError::Encoder(_) => "encoder",
            HarnessError::Model(_) => "model",
            HarnessError::Io { .. } => "io",
            HarnessError::Json(_) => "serialization",
            HarnessError::BankChannelMismatch { .. } => "bank",
            HarnessError::ArmsFailed { .. } => "ablate_partial_failure",
        };
    }
    if err.downcast_ref::<famix::config::ConfigError>().is_some() {
        return "config";
    }
    "other"
}
