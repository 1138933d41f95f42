use std::path::PathBuf;
use std::process::ExitCode;

use caim::experiment::{
    cmd_ablate, cmd_cost, cmd_eval, cmd_gen_data, cmd_pretrain, cmd_train, AblateOptions, EvalOptions, EvalSplit,
    ExperimentConfig, Overrides, TrainOptions,
};
use caim::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "caim", version, about = "Gated feature-modulation adapters for cross-modality face matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON). Defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(
            self.config.as_deref(),
            &Overrides {
                seed: self.seed,
                out_dir: self.out.clone(),
            },
        )
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Cross,
    SourceSanity,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-modality dataset and fold protocol.
    GenData(Common),
    /// Pretrain and freeze the backbone on source-modality images.
    Pretrain(Common),
    /// Train the inserted blocks on every fold.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue interrupted folds from their saved state.
        #[arg(long)]
        resume: bool,
        /// Only these folds (comma separated).
        #[arg(long, value_delimiter = ',')]
        folds: Option<Vec<usize>>,
        /// Output subdirectory for fold checkpoints.
        #[arg(long, default_value = "train")]
        subdir: String,
    },
    /// Score the baseline and (optionally) trained checkpoints.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory containing fold<k>/model.ckpt; baseline only when omitted.
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "cross")]
        split: Split,
        /// Embed probes with the modality gate closed.
        #[arg(long)]
        gate_closed: bool,
        #[arg(long, value_delimiter = ',')]
        folds: Option<Vec<usize>>,
    },
    /// Sweep insertion plans and unconditional variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        folds: Option<Vec<usize>>,
        /// Only these variant labels (e.g. "1-3,IN 1-3").
        #[arg(long, value_delimiter = ',')]
        only: Option<Vec<String>>,
    },
    /// Parameter and FLOP overhead of every insertion plan.
    Cost(Common),
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = c.load()?;
            println!("{}", cmd_gen_data(&cfg, c.force)?);
        }
        Command::Pretrain(c) => {
            let cfg = c.load()?;
            println!("{}", cmd_pretrain(&cfg, c.force)?);
        }
        Command::Train {
            common,
            resume,
            folds,
            subdir,
        } => {
            let cfg = common.load()?;
            let opts = TrainOptions {
                force: common.force,
                resume,
                subdir,
                folds,
            };
            println!("{}", cmd_train(&cfg, &opts)?);
        }
        Command::Eval {
            common,
            models,
            split,
            gate_closed,
            folds,
        } => {
            let cfg = common.load()?;
            let opts = EvalOptions {
                force: common.force,
                split: match split {
                    Split::Cross => EvalSplit::CrossModality,
                    Split::SourceSanity => EvalSplit::SourceSanity,
                },
                models,
                gate_closed,
                folds,
            };
            println!("{}", cmd_eval(&cfg, &opts)?);
        }
        Command::Ablate { common, folds, only } => {
            let cfg = common.load()?;
            let opts = AblateOptions {
                force: common.force,
                folds,
                only,
            };
            println!("{}", cmd_ablate(&cfg, &opts)?);
        }
        Command::Cost(c) => {
            let cfg = c.load()?;
            println!("{}", cmd_cost(&cfg, c.force)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
