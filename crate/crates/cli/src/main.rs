use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use picogrpo::error::Error;
use picogrpo_cli::{commands, config};

#[derive(Parser)]
#[command(name = "picogrpo", version, about = "Desk-scale LoRA + GRPO trainer for verifiable math rewards")]
struct Cli {
    /// Run configuration file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Dotted-key overrides, e.g. --set train.learning_rate=1e-4.
    #[arg(long = "set", global = true, action = ArgAction::Append, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Master seed shorthand: overrides train.seed, pretrain.seed and
    /// eval.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for evaluation fan-out.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Supervised next-token pretraining of the base model.
    Pretrain {
        /// Resume from a pretrain checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Save an intermediate checkpoint every N steps.
        #[arg(long)]
        save_every: Option<u64>,
    },
    /// GRPO fine-tuning of LoRA adapters against verifiable rewards.
    Train {
        /// Base weights from a pretrain (or previous) checkpoint.
        #[arg(long)]
        init_from: Option<PathBuf>,
        /// Resume from a grpo checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        save_every: Option<u64>,
    },
    /// k-shot exact-match evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Batch-grade a record file of completions against ground truths.
    Grade {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Memory-footprint estimate for a model/run configuration.
    Budget {
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Finite-difference verification suite.
    Gradcheck {
        /// Randomized cases per primitive.
        #[arg(long, default_value_t = 100)]
        seeds: usize,
    },
    /// Generate a synthetic arithmetic dataset.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        difficulty: u8,
        /// File name inside --out.
        #[arg(long, default_value = "synthetic.jsonl")]
        name: String,
    },
}

fn require_out(out: &Option<PathBuf>) -> Result<&PathBuf, Error> {
    out.as_ref()
        .ok_or_else(|| Error::config("--out DIR is required for this command".to_string()))
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = config::parse_config(cli.config.as_deref(), &cli.set)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.pretrain.seed = seed;
        cfg.eval.seed = seed;
    }
    if let Some(workers) = cli.workers {
        cfg.eval.workers = workers.max(1);
    }
    match &cli.command {
        Command::Pretrain { resume, save_every } => commands::run_pretrain(
            &cfg,
            require_out(&cli.out)?,
            resume.as_deref(),
            *save_every,
        ),
        Command::Train {
            init_from,
            resume,
            save_every,
        } => commands::run_train(
            &cfg,
            require_out(&cli.out)?,
            init_from.as_deref(),
            resume.as_deref(),
            *save_every,
        ),
        Command::Eval { checkpoint } => {
            commands::run_eval(&cfg, checkpoint, require_out(&cli.out)?)
        }
        Command::Grade { input, output } => commands::run_grade(input, output),
        Command::Budget { json } => commands::run_budget(&cfg, json.as_deref()),
        Command::Gradcheck { seeds } => commands::run_gradcheck(*seeds),
        Command::GenData { n, difficulty, name } => {
            let seed = cli.seed.unwrap_or(0);
            commands::run_gen_data(require_out(&cli.out)?, name, *n, *difficulty, seed)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // usage problems are config errors under the exit-code contract
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}
