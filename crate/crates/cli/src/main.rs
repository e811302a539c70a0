//! `longctx`: pretrain, fine-tune, evaluate and benchmark the long-context
//! retrieval encoder, and generate needle-in-a-haystack tasks.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use error::CliError;
use longctx::losses::LossKind;

#[derive(Parser, Debug)]
#[command(name = "longctx", version, about = "Long-context retrieval encoder lab")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Masked-language pretraining on the configured mixture.
    Pretrain {
        /// Checkpoint to extend to the configured max_seq_len and continue from.
        #[arg(long)]
        warm_start: Option<PathBuf>,
    },
    /// Contrastive fine-tuning on a retrieval task directory.
    Finetune {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        task: Option<PathBuf>,
        /// Frozen teacher checkpoint for the prototype loss.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        loss: Option<LossKind>,
    },
    /// nDCG@10 of a checkpoint (or BM25) on a task directory.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        task: Option<PathBuf>,
        /// Rank with BM25 instead of a checkpoint.
        #[arg(long, conflicts_with = "model")]
        bm25: bool,
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Writes a needle-in-a-haystack task; with --model, also runs the
    /// 40-position sweep.
    Synth {
        #[arg(long)]
        position: Option<usize>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        strategy: Option<String>,
        /// Also write a training task with this many queries to <out>/train.
        #[arg(long)]
        train_queries: Option<usize>,
        /// Training passages are placed in slots 0..max_position.
        #[arg(long, default_value_t = longctx::synth::PASSAGES_PER_DOC)]
        max_position: usize,
    },
    /// Median time to tokenise and embed documents of each length.
    Bench {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Tiles a checkpoint's positional table to a longer max_seq_len.
    ExtendPos {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        max_seq_len: usize,
    },
    /// Embeds a JSONL corpus, writing {"_id", "embedding"} lines.
    Embed {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        strategy: Option<String>,
    },
}

fn load_config(common: &Common, required: bool) -> Result<RunConfig, CliError> {
    match &common.config {
        Some(p) => RunConfig::load(p),
        None if required => Err(CliError::Usage("--config is required for this command".into())),
        None => Ok(RunConfig::default()),
    }
}

fn set<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let common = &cli.common;
    let mut cfg = load_config(common, matches!(cli.command, Command::Pretrain { .. }))?;
    set(&mut cfg.seed, common.seed);
    set(&mut cfg.paths.out, common.out.clone());
    match &cli.command {
        Command::Pretrain { warm_start } => set(&mut cfg.paths.warm_start, warm_start.clone()),
        Command::Finetune {
            model,
            task,
            teacher,
            loss,
        } => {
            set(&mut cfg.paths.model, model.clone());
            set(&mut cfg.paths.task, task.clone());
            set(&mut cfg.paths.teacher, teacher.clone());
            set(&mut cfg.loss, *loss);
        }
        Command::Eval {
            model, task, strategy, ..
        } => {
            set(&mut cfg.paths.model, model.clone());
            set(&mut cfg.paths.task, task.clone());
            set(&mut cfg.strategy, strategy.clone());
        }
        Command::Synth {
            position,
            model,
            strategy,
            ..
        } => {
            if let Some(p) = position {
                cfg.synth.position = *p;
            }
            set(&mut cfg.paths.model, model.clone());
            set(&mut cfg.strategy, strategy.clone());
        }
        Command::Bench {
            model,
            lengths,
            runs,
            strategy,
        } => {
            set(&mut cfg.paths.model, model.clone());
            if let Some(l) = lengths {
                cfg.bench.lengths = l.clone();
            }
            if let Some(r) = runs {
                cfg.bench.runs = *r;
            }
            set(&mut cfg.strategy, strategy.clone());
        }
        Command::ExtendPos { model, .. } => set(&mut cfg.paths.model, model.clone()),
        Command::Embed { model, input, strategy } => {
            set(&mut cfg.paths.model, model.clone());
            set(&mut cfg.paths.input, input.clone());
            set(&mut cfg.strategy, strategy.clone());
        }
    }
    cfg.resolve()?;
    log::info!("resolved config:\n{}", cfg.render());
    match cli.command {
        Command::Pretrain { .. } => commands::pretrain(&cfg),
        Command::Finetune { .. } => commands::finetune(&cfg),
        Command::Eval { bm25, .. } => commands::eval(&cfg, bm25),
        Command::Synth {
            train_queries,
            max_position,
            ..
        } => commands::synth(&cfg, train_queries, max_position),
        Command::Bench { .. } => commands::bench(&cfg),
        Command::ExtendPos { max_seq_len, .. } => commands::extend_pos(&cfg, max_seq_len),
        Command::Embed { .. } => commands::embed(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
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
