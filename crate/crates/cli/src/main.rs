mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "kvlab", version, about = "Sparse prefill and progressive KV compression on a toy transformer")]
pub struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Base directory for relative input and output paths.
    #[arg(long, global = true, env = "KVLAB_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    /// Also write the command's primary output to stdout.
    #[arg(long, global = true)]
    pub stdout: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Initialise model weights from a seed.
    GenModel(GenModelArgs),
    /// Build multi-turn dialogue instances.
    GenBench(GenBenchArgs),
    /// Run sessions over instances and record transcripts.
    Run(RunArgs),
    /// Turn transcripts (and optional plans) into metric tables.
    Analyze(AnalyzeArgs),
    /// Run an exact or greedy line-selection oracle, or validate instances.
    Oracle(OracleArgs),
}

#[derive(Debug, Args)]
pub struct GenModelArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    #[arg(long, default_value_t = 8)]
    pub d_k: usize,
    #[arg(long, default_value_t = 8)]
    pub d_v: usize,
    /// Defaults to the size of `--vocab`, or of the synthetic vocabulary.
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 2048)]
    pub max_seq_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchKind {
    Qa,
    Sum,
    Fewshot,
}

#[derive(Debug, Args)]
pub struct GenBenchArgs {
    #[arg(long, value_enum, default_value_t = BenchKind::Qa)]
    pub kind: BenchKind,
    /// JSONL corpus of records; a synthetic corpus is generated when absent.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Plain-text file of noise paragraphs separated by blank lines.
    #[arg(long)]
    pub noise: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// Turns per QA instance.
    #[arg(long, default_value_t = 3)]
    pub turns: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Where to write the vocabulary matching the instances.
    #[arg(long)]
    pub vocab_out: Option<PathBuf>,
    /// Cap for a vocabulary built from a user corpus.
    #[arg(long, default_value_t = 8192)]
    pub vocab_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Dense,
    Sparse,
    ObswindowBaseline,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub instances: PathBuf,
    /// Vocabulary JSON; the synthetic vocabulary when absent.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// JSON file of run settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub interval: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub obs_window: Option<usize>,
    #[arg(long)]
    pub sample_rate: Option<f64>,
    #[arg(long)]
    pub sample_floor: Option<usize>,
    #[arg(long)]
    pub max_new: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Full-coverage prefill and a budget of the whole context.
    #[arg(long)]
    pub lossless: bool,
    /// Record wall-clock times (makes transcripts run-dependent).
    #[arg(long)]
    pub timings: bool,
    /// Transcripts JSONL.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub events: Option<PathBuf>,
    #[arg(long)]
    pub plans: Option<PathBuf>,
    /// Detokenized answers JSONL.
    #[arg(long)]
    pub answers: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Analysis {
    Scores,
    Ops,
    SegmentOverlap,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub transcripts: PathBuf,
    /// Plans JSONL written by `run --plans`; enables segment overlap.
    #[arg(long)]
    pub plans: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Analysis::Scores, Analysis::Ops, Analysis::SegmentOverlap])]
    pub which: Vec<Analysis>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OracleKind {
    MinLines,
    Greedy,
    Validate,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, value_enum, default_value_t = OracleKind::MinLines)]
    pub which: OracleKind,
    /// JSON block: a list of rows, or `{"alpha": .., "rows": [..]}`.
    #[arg(long)]
    pub block: Option<PathBuf>,
    /// Instances JSONL for `--which validate`.
    #[arg(long)]
    pub instances: Option<PathBuf>,
    /// Overrides the block file's alpha; 0.955 when neither is given.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::validation("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::runtime(e.to_string()))?;
    }
    let ctx = commands::Context { data_dir: cli.data_dir, stdout: cli.stdout };
    match cli.command {
        Command::GenModel(a) => commands::gen_model(&ctx, a),
        Command::GenBench(a) => commands::gen_bench(&ctx, a),
        Command::Run(a) => commands::run(&ctx, a),
        Command::Analyze(a) => commands::analyze(&ctx, a),
        Command::Oracle(a) => commands::oracle(&ctx, a),
    }
}
