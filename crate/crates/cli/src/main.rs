mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

/// Failure classes, each with its own exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration; nothing was run.
    Config(String),
    /// The run started and failed.
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<xlmp::Error> for CliError {
    fn from(e: xlmp::Error) -> Self {
        match e {
            xlmp::Error::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

#[derive(Parser)]
#[command(name = "xlmp", version, about = "Prompt-pool multilingual encoder: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TaskArg {
    Token,
    Sentence,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Standard,
    Prompt,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic multilingual corpus and parallel test pairs.
    GenCorpus {
        /// Corpus description (JSON).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Masked-token pre-training.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from a pre-training checkpoint.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Continue training with the added contrastive loss.
    Posttrain {
        #[arg(long)]
        config: PathBuf,
        /// Pre-trained checkpoint, or a post-training checkpoint to resume.
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a task head together with the encoder.
    Finetune {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        ckpt: PathBuf,
        /// Training data: `token<TAB>tag` lines for token tasks,
        /// `sentence<TAB>label` lines for sentence tasks.
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
        /// Run config; only `seed`, `train` and `data.max_len` are used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Keep the prompt pool fixed in prompt mode.
        #[arg(long)]
        freeze_pool: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parallel sentence retrieval by nearest mean hidden state.
    EvalRetrieval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Source sentences, one per line, aligned with `--tgt`.
        #[arg(long, requires = "tgt", conflicts_with = "pairs")]
        src: Option<PathBuf>,
        #[arg(long, requires = "src")]
        tgt: Option<PathBuf>,
        /// `source<TAB>target` lines.
        #[arg(long, required_unless_present = "src")]
        pairs: Option<PathBuf>,
        #[arg(long, conflicts_with = "sweep")]
        layer: Option<usize>,
        /// Evaluate every layer.
        #[arg(long)]
        sweep: bool,
        /// Encode without retrieved prompts.
        #[arg(long)]
        no_prompts: bool,
        /// Average over prompt positions as well.
        #[arg(long, conflicts_with = "no_prompts")]
        include_prompt_positions: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prompt selection statistics per language.
    AnalyzePrompts {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of `<lang>.txt` files.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sentences per language in the prompt export.
        #[arg(long, default_value_t = 200)]
        per_language: usize,
        /// Label shuffles for the separation null.
        #[arg(long, default_value_t = 20)]
        permutations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare analytic and finite-difference gradients of a whole model.
    GradCheck {
        #[arg(long, default_value = "tiny")]
        preset: String,
        /// Fraction of each tensor's elements to probe.
        #[arg(long, default_value_t = 0.01)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
        /// Half-width of the central difference.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Gradient magnitude below which errors are measured absolutely.
        #[arg(long)]
        floor: Option<f64>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
