mod commands;
mod config;

use clap::{Parser, Subcommand, ValueEnum};
use csgan::CsError;
use serde::Serialize;
use std::path::PathBuf;
use std::process::ExitCode;

use config::Overrides;

#[derive(Parser, Debug)]
#[command(
    name = "csgan",
    version,
    about = "Two-stage adversarial code-switched text generation"
)]
struct Cli {
    /// JSON configuration; flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "snake_case")]
enum Command {
    /// Write synthetic matrix, embedded and code-switched corpora
    Synth {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Sentences per monolingual corpus
        #[arg(long)]
        n_sentences: Option<usize>,
        /// Switch probability of the synthetic code-switched corpus
        #[arg(long)]
        p_sw: Option<f64>,
    },
    /// Build a vocabulary file from the three corpora
    Vocab {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        embedded: PathBuf,
        #[arg(long)]
        cs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        min_count: Option<usize>,
    },
    /// Reconstruction-only generator pretraining
    Pretrain {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        embedded: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Adversarial training of one stage
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Starting checkpoint; required for stage 2
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        vocab: PathBuf,
        /// Stage-1 corpora
        #[arg(long)]
        matrix: Option<PathBuf>,
        #[arg(long)]
        embedded: Option<PathBuf>,
        /// Stage-2 corpora
        #[arg(long)]
        negatives: Option<PathBuf>,
        #[arg(long)]
        real_cs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Transfer matrix sentences with a stage-1 model to get stage-2 negatives
    Negatives {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Mix in embedded-to-matrix transfers
        #[arg(long, requires = "embedded")]
        mixed: bool,
        #[arg(long)]
        embedded: Option<PathBuf>,
    },
    /// Greedy transfer of a corpus under a style
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// matrix, embedded, negatives, or a file path
        #[arg(long)]
        source: String,
        /// l_m, l_e, l_a or l_n
        #[arg(long)]
        style: String,
        #[arg(long)]
        out: PathBuf,
        /// Where the named sources live
        #[arg(long, default_value = ".")]
        data_dir: PathBuf,
        /// Sentences taken from the front of the source
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Code-switching metrics of one corpus
    Evaluate {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "corpus")]
        name: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Metrics of candidate corpora against a real code-switched reference
    Report {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, default_value = "real_cs")]
        reference_name: String,
        /// name=path, repeatable
        #[arg(long = "candidate", required = true)]
        candidates: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Format {
    Csv,
    Json,
}

/// A failed command: message, stable code and exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: String,
    pub msg: String,
    pub exit: u8,
}

impl Failure {
    pub fn config(code: &str, msg: impl Into<String>) -> Self {
        Failure {
            code: code.to_string(),
            msg: msg.into(),
            exit: 2,
        }
    }

    pub fn runtime(code: &str, msg: impl Into<String>) -> Self {
        Failure {
            code: code.to_string(),
            msg: msg.into(),
            exit: 3,
        }
    }
}

impl From<CsError> for Failure {
    fn from(e: CsError) -> Self {
        let exit = if e.is_config() { 2 } else { 3 };
        Failure {
            code: e.code().to_string(),
            msg: e.to_string(),
            exit,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            eprintln!("error_code=USAGE");
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            eprintln!("error_code={}", f.code);
            ExitCode::from(f.exit)
        }
    }
}
