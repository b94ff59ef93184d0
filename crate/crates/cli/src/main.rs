//! `absa-cd` command-line tool.
//!
//! Exit codes: 0 success, 1 fatal error, 2 invalid configuration.

mod commands;
mod io;
mod setup;

use std::path::PathBuf;
use std::process::ExitCode;

use absa_cd::constraint::ConstraintMode;
use absa_cd::schema::Task;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "absa-cd", version, about = "Schema-guided constrained decoding for aspect-based sentiment analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct SchemaArgs {
    /// Schema config file (key=value); defaults to the built-in restaurant schema.
    #[arg(long, value_name = "FILE")]
    pub schema: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[command(flatten)]
    pub schema: SchemaArgs,
    /// `whitespace`, or a vocabulary file with one piece per line (id = line number).
    #[arg(long, default_value = "whitespace", value_name = "FILE|whitespace")]
    pub vocab: String,
    /// e2e, acte or tasd.
    #[arg(long, default_value = "tasd")]
    pub task: Task,
    /// bag (candidate pools per element) or trie (whole phrases only).
    #[arg(long, default_value = "bag")]
    pub mode: ConstraintMode,
}

#[derive(Args, Debug, Clone)]
pub struct EndpointArgs {
    /// Base URL of an OpenAI-compatible server.
    #[arg(long, value_name = "URL")]
    pub endpoint: Option<String>,
    #[arg(long, default_value = absa_cd::llm::DEFAULT_MODEL)]
    pub model: String,
    /// Environment variable holding the API key.
    #[arg(long, default_value = absa_cd::llm::DEFAULT_API_KEY_VAR, value_name = "VAR")]
    pub api_key_env: String,
    /// Request timeout in seconds.
    #[arg(long, default_value_t = 60)]
    pub timeout: u64,
    /// Maximum concurrent requests.
    #[arg(long, default_value_t = 4)]
    pub max_in_flight: usize,
    /// Prompt instruction template file.
    #[arg(long, value_name = "FILE")]
    pub template: Option<PathBuf>,
    /// Demonstrations taken from the head of this training JSONL.
    #[arg(long, value_name = "JSONL")]
    pub train: Option<PathBuf>,
    /// Number of demonstrations (0 for zero-shot).
    #[arg(long, default_value_t = 0)]
    pub shots: usize,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Convert SemEval ABSA XML into JSONL records.
    Ingest {
        /// One or more XML files; they are ingested in parallel and concatenated.
        #[arg(long = "in", required = true, num_args = 1.., value_name = "XML")]
        input: Vec<PathBuf>,
        #[arg(long, value_name = "JSONL")]
        out: PathBuf,
        /// Language tag stored on every record.
        #[arg(long, default_value = "en")]
        lang: String,
        /// Keep sentences without opinions.
        #[arg(long)]
        keep_empty: bool,
    },
    /// Shuffle-split JSONL records into train and dev parts.
    Split {
        #[arg(long = "in", value_name = "JSONL")]
        input: PathBuf,
        #[arg(long, value_name = "JSONL")]
        train: PathBuf,
        #[arg(long, value_name = "JSONL")]
        dev: PathBuf,
        #[arg(long, default_value_t = absa_cd::corpus::DEFAULT_SPLIT_SEED)]
        seed: u64,
        /// Train:dev proportion.
        #[arg(long, default_value = "9:1")]
        ratio: String,
    },
    /// Print dataset statistics for XML or JSONL input.
    Stats {
        #[arg(long = "in", value_name = "XML|JSONL")]
        input: PathBuf,
        #[arg(long, default_value = "en")]
        lang: String,
        /// Count sentences without opinions (XML input).
        #[arg(long)]
        keep_empty: bool,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Write model-ready input/target pairs.
    BuildData {
        #[arg(long = "in", value_name = "JSONL")]
        input: PathBuf,
        #[arg(long, value_name = "JSONL")]
        out: PathBuf,
        #[arg(long, default_value = "tasd")]
        task: Task,
        #[command(flatten)]
        schema: SchemaArgs,
    },
    /// Greedy constrained decoding over a scorer.
    Decode {
        #[arg(long, value_name = "JSONL")]
        input: PathBuf,
        #[arg(long, value_name = "JSONL")]
        out: PathBuf,
        /// `scripted:<file>`, `random:<seed>` or `remote`.
        #[arg(long)]
        scorer: String,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = absa_cd::decode::DEFAULT_MAX_LEN)]
        max_len: usize,
        /// Take the raw argmax without constraints (comparison runs).
        #[arg(long)]
        no_mask: bool,
        /// Also write per-sentence token ids, text and diagnostics.
        #[arg(long, value_name = "JSONL")]
        details: Option<PathBuf>,
        #[command(flatten)]
        endpoint: EndpointArgs,
    },
    /// Score predictions against gold with exact-match micro-F1.
    Eval {
        /// Prediction JSONL; repeat for several runs to get a 95% interval.
        #[arg(long, required = true, num_args = 1.., value_name = "JSONL")]
        pred: Vec<PathBuf>,
        #[arg(long, value_name = "JSONL")]
        gold: PathBuf,
        #[arg(long, default_value = "tasd")]
        task: Task,
        /// Write the JSON report here.
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
        /// Print the JSON report instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Render LLM prompts, or send them and parse the replies.
    Prompt {
        /// Sentences to prompt for (JSONL records).
        #[arg(long = "in", value_name = "JSONL", conflicts_with = "sentence")]
        input: Option<PathBuf>,
        /// A single sentence.
        #[arg(long)]
        sentence: Option<String>,
        #[arg(long, default_value = "tasd")]
        task: Task,
        /// Language of the demonstrations.
        #[arg(long, default_value = "en")]
        lang: String,
        #[command(flatten)]
        schema: SchemaArgs,
        #[command(flatten)]
        endpoint: EndpointArgs,
        /// With --endpoint: write parsed predictions here.
        #[arg(long, value_name = "JSONL")]
        out: Option<PathBuf>,
    },
    /// Show the candidate-table row and candidate tokens after a prefix.
    ExplainConstraints {
        /// Generated text so far, e.g. "[A] soup [".
        #[arg(long, allow_hyphen_values = true)]
        prefix: String,
        #[arg(long)]
        sentence: String,
        #[command(flatten)]
        model: ModelArgs,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Config(problems)) => {
            eprintln!("invalid configuration:");
            for p in problems {
                eprintln!("  - {p}");
            }
            ExitCode::from(2)
        }
        Err(commands::Failure::Fatal(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
