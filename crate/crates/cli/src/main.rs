//! `salm`: train tag-prefixed LSTM language models and apply them to
//! plain text with particle-filter inference.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or file
//! format error, 3 numeric failure.

mod commands;
mod config;
mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use salm_core::Error;

use config::{CliConfig, Knobs};

#[derive(Parser)]
#[command(
    name = "salm",
    version,
    about = "Syntax-aware LSTM language models with particle-filter inference",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Emit a small synthetic tagged corpus (toy grammar)
    DemoCorpus {
        #[command(flatten)]
        knobs: Knobs,
        /// Number of sentences to sample
        #[arg(long, default_value_t = 200)]
        sentences: usize,
        /// Emit plain text instead of the two-column tagged format
        #[arg(long)]
        plain: bool,
        /// Output path (standard out when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the vocabulary and report rendered-sequence statistics
    Preprocess {
        #[command(flatten)]
        knobs: Knobs,
        /// Tagged corpus, one "word<TAB>TAG" per line, blank line between sentences
        corpus: Option<PathBuf>,
        /// Rendered sentences to include verbatim in the report
        #[arg(long, default_value_t = 3)]
        preview: usize,
        /// Output path (standard out when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and write it to a file
    Train {
        #[command(flatten)]
        knobs: Knobs,
        /// Tagged corpus, one "word<TAB>TAG" per line, blank line between sentences
        corpus: Option<PathBuf>,
        /// Model output path
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-epoch history, one JSON record per line
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Score plain text and print a perplexity report
    Score {
        #[command(flatten)]
        knobs: Knobs,
        /// Model file written by `train`
        #[arg(long)]
        model: PathBuf,
        /// Plain-text file, one sentence per line ("-" or omitted reads stdin)
        input: Option<PathBuf>,
        /// Output path (standard out when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-word tag posteriors for a sentence, one JSON line per word
    Posterior {
        #[command(flatten)]
        knobs: Knobs,
        /// Model file written by `train`
        #[arg(long)]
        model: PathBuf,
        /// The sentence, given as trailing words
        words: Vec<String>,
        /// Read words from stdin and reprint the posterior table after each
        #[arg(long, conflicts_with = "words")]
        interactive: bool,
        /// Append a final JSON line with the smoothed whole-sentence table
        #[arg(long)]
        smoothed: bool,
    },
    /// Sample text from a trained model
    Generate {
        #[command(flatten)]
        knobs: Knobs,
        /// Model file written by `train`
        #[arg(long)]
        model: PathBuf,
        /// Words to condition on before sampling
        #[arg(long, default_value = "")]
        seed_text: String,
        /// Number of samples, one per line
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Train and score a grid of model variants and training-set sizes
    Sweep {
        #[command(flatten)]
        knobs: Knobs,
        /// Tagged corpus, one "word<TAB>TAG" per line, blank line between sentences
        corpus: Option<PathBuf>,
        /// Results CSV path (default sweep.csv); config JSON lands next to it
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact tag-marginalized probabilities by brute-force enumeration
    Oracle {
        #[command(flatten)]
        knobs: Knobs,
        /// Model file written by `train`
        #[arg(long)]
        model: PathBuf,
        /// The sentence, given as trailing words
        words: Vec<String>,
        /// Which exact quantities to compute
        #[arg(long, value_enum, default_value_t = commands::OracleWhat::Both)]
        what: commands::OracleWhat,
    },
    /// Compare analytic gradients against finite differences
    Gradcheck {
        #[command(flatten)]
        knobs: Knobs,
        /// Number of randomized small models to check
        #[arg(long, default_value_t = 20)]
        models: usize,
        /// Finite-difference step
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Maximum acceptable relative error
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        // usage: the invocation itself is wrong
        Error::InvalidConfig(_) | Error::InvalidInput(_) => 1,
        // data or format: the inputs are wrong
        Error::Parse { .. }
        | Error::Io { .. }
        | Error::UnknownTag(_)
        | Error::InsufficientData { .. }
        | Error::IndexOutOfRange { .. }
        | Error::VersionMismatch { .. }
        | Error::ChecksumMismatch(_)
        | Error::ShapeMismatch(_)
        | Error::ModelFormat(_)
        | Error::BudgetExceeded { .. } => 2,
        // numeric: the computation failed
        Error::Dimension { .. }
        | Error::Numeric(_)
        | Error::FilterCollapse { .. }
        | Error::DegenerateSlot { .. }
        | Error::Internal(_) => 3,
    }
}

fn dispatch(command: &Command) -> salm_core::Result<()> {
    // every subcommand resolves the same merged config; positional corpus
    // paths count as flag-level overrides
    let (knobs, corpus_arg) = match command {
        Command::DemoCorpus { knobs, .. }
        | Command::Score { knobs, .. }
        | Command::Posterior { knobs, .. }
        | Command::Generate { knobs, .. }
        | Command::Oracle { knobs, .. }
        | Command::Gradcheck { knobs, .. } => (knobs, None),
        Command::Preprocess { knobs, corpus, .. }
        | Command::Train { knobs, corpus, .. }
        | Command::Sweep { knobs, corpus, .. } => (knobs, corpus.clone()),
    };
    let config = CliConfig::merge(knobs, corpus_arg)?;
    if knobs.print_config {
        return commands::print_config(&config);
    }
    match command {
        Command::DemoCorpus { sentences, plain, out, .. } => {
            commands::demo_corpus(&config, *sentences, *plain, out.as_ref())
        }
        Command::Preprocess { preview, out, .. } => commands::preprocess(&config, *preview, out.as_ref()),
        Command::Train { out, history, .. } => {
            let out = out
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("train needs --out for the model file".into()))?;
            commands::train(&config, out, history.as_ref())
        }
        Command::Score { model, input, out, .. } => {
            commands::score(&config, model, input.as_ref(), out.as_ref())
        }
        Command::Posterior { model, words, interactive, smoothed, .. } => {
            commands::posterior(&config, model, words, *interactive, *smoothed)
        }
        Command::Generate { model, seed_text, count, .. } => {
            commands::generate_cmd(&config, model, seed_text, *count)
        }
        Command::Sweep { out, .. } => commands::sweep(&config, out.as_ref()),
        Command::Oracle { model, words, what, .. } => commands::oracle(&config, model, words, *what),
        Command::Gradcheck { models, eps, tol, .. } => commands::gradcheck(&config, *models, *eps, *tol),
    }
}

fn main() {
    let cli = Cli::try_parse().unwrap_or_else(|e| {
        use clap::error::ErrorKind;
        let code = match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
            _ => 1,
        };
        let _ = e.print();
        std::process::exit(code);
    });
    if let Err(e) = dispatch(&cli.command) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
