//! Experiment driver: dataset generation, pretraining, finetuning,
//! structural ablations, routing traces and evaluation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ni_core::commands::{self, AblationKind, DatasetKind};
use ni_core::config::ExperimentConfig;
use ni_core::train::Regime;

#[derive(Parser)]
#[command(name = "ni", about = "Neural interpreter experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config (TOML); desk-scale defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<ExperimentConfig, commands::CmdError> {
        let cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::desk_default(),
        };
        for warning in cfg.range_warnings() {
            eprintln!("warning: {warning}");
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    ClsOnly,
    ClsPlusType,
    All,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Regime {
        match r {
            RegimeArg::ClsOnly => Regime::ClsOnly,
            RegimeArg::ClsPlusType => Regime::ClsPlusType,
            RegimeArg::All => Regime::All,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Drop,
    Extend,
    Anytime,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Pretrain,
    Adapt,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the fuzzy Boolean task family and write the dataset manifest.
    Gen {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also export the datasets as CSV.
        #[arg(long)]
        csv: bool,
        #[arg(long)]
        overwrite: bool,
    },
    /// Pre-train on the pretraining tasks.
    Pretrain {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Finetune a checkpoint on the adaptation tasks under a regime.
    Finetune {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        regime: RegimeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Functions appended before finetuning (capacity extension).
        #[arg(long, default_value_t = 0)]
        added_functions: usize,
    },
    /// Structural ablations: function dropping, capacity extension,
    /// anytime inference.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export routing traces (compatibilities and types) as JSON lines.
    Trace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset's validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "pretrain")]
        split: SplitArg,
        /// Iteration-count override (anytime inference).
        #[arg(long)]
        n_iterations: Option<usize>,
    },
}

fn run() -> Result<(), commands::CmdError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Gen {
            config,
            seed,
            out,
            csv,
            overwrite,
        } => {
            let cfg = config.load()?;
            let manifest = commands::cmd_gen(&cfg, seed, &out, csv, overwrite)?;
            println!(
                "wrote {} ({} pretrain + {} adaptation tasks, {} samples each)",
                out.join(commands::DATASET_MANIFEST_FILE).display(),
                manifest.pretrain_tables.len(),
                manifest.adapt_tables.len(),
                manifest.num_samples
            );
        }
        Command::Pretrain {
            config,
            data,
            out,
            seed,
        } => {
            let cfg = config.load()?;
            let report = commands::cmd_pretrain(&cfg, &data, &out, seed)?;
            println!(
                "pretrained: val loss {:.6}, mean R^2 {:.4} (best epoch {})",
                report.final_val_loss,
                report.mean_r2(),
                report.best_epoch
            );
        }
        Command::Finetune {
            config,
            checkpoint,
            data,
            out,
            regime,
            seed,
            added_functions,
        } => {
            let cfg = config.load()?;
            let report = commands::cmd_finetune(
                &cfg,
                &checkpoint,
                &data,
                &out,
                regime.into(),
                seed,
                added_functions,
            )?;
            println!(
                "finetuned: val loss {:.6}, mean R^2 {:.4}",
                report.final_val_loss,
                report.mean_r2()
            );
        }
        Command::Ablate {
            config,
            checkpoint,
            data,
            kind,
            out,
        } => {
            let cfg = config.load()?;
            let kind = match kind {
                KindArg::Drop => AblationKind::Drop,
                KindArg::Extend => AblationKind::Extend,
                KindArg::Anytime => AblationKind::Anytime,
            };
            let report = commands::cmd_ablate(&cfg, &checkpoint, &data, kind, &out)?;
            for row in &report.rows {
                println!(
                    "{} {}{}: mean R^2 {:.4}",
                    row.label,
                    row.value,
                    row.seed.map_or(String::new(), |s| format!(" (seed {s})")),
                    row.mean_r2
                );
            }
        }
        Command::Trace {
            checkpoint,
            data,
            samples,
            out,
        } => {
            let lines = commands::cmd_trace(&checkpoint, &data, samples, &out)?;
            println!("wrote {} trace records to {}", lines.len(), out.display());
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            n_iterations,
        } => {
            let kind = match split {
                SplitArg::Pretrain => DatasetKind::Pretrain,
                SplitArg::Adapt => DatasetKind::Adapt,
            };
            let report = commands::cmd_eval(&checkpoint, &data, kind, n_iterations)?;
            println!("val loss {:.6}", report.loss);
            for (i, r2) in report.r2_per_task.iter().enumerate() {
                println!("task {i}: R^2 {r2:.4}");
            }
            println!("mean R^2 {:.4}", report.mean_r2());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{}]: {err}", err.category());
            ExitCode::FAILURE
        }
    }
}
