//! Rendering perplexity reports for standard out. JSON is the canonical
//! form; CSV and the human table are projections of it and never feed
//! back into computation.

use salm_core::eval::PerplexityReport;
use salm_core::{Error, Result};

use crate::config::FormatArg;

/// `x` to `sig` significant digits in plain decimal notation.
pub fn format_sig(x: f64, sig: usize) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return format!("{:.*}", sig.saturating_sub(1), 0.0);
    }
    let magnitude = x.abs().log10().floor() as i64;
    let decimals = (sig as i64 - 1 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

fn opt_sig(x: &Option<f64>, sig: usize) -> String {
    match x {
        Some(v) => format_sig(*v, sig),
        None => "inf".to_string(),
    }
}

fn csv_text(report: &PerplexityReport) -> String {
    let mut out = String::from("word,n_t,log2_p,perplexity\n");
    let mut total_units = 0usize;
    for w in &report.words {
        total_units += w.n_t;
        let log2 = w.log2_p.map(|v| v.to_string()).unwrap_or_default();
        let pp = w.perplexity.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", w.word.replace(',', "_"), w.n_t, log2, pp));
    }
    // trailing summary row; "[corpus]" cannot collide with a word because
    // scored words are whitespace-split
    let corpus = report.corpus_perplexity.map(|v| v.to_string()).unwrap_or_default();
    out.push_str(&format!("[corpus],{total_units},,{corpus}\n"));
    out
}

fn human_text(report: &PerplexityReport) -> String {
    let estimator = match report.estimator {
        salm_core::eval::Estimator::Direct => "direct",
        salm_core::eval::Estimator::Synsir => "synsir",
    };
    let mut out = format!(
        "model {}  level {}  mode {}  estimator {}\n\n",
        report.model_id, report.level, report.mode, estimator
    );
    let width = report.words.iter().map(|w| w.word.len()).max().unwrap_or(4).max(4);
    out.push_str(&format!("{:<width$}  {:>4}  {:>10}  {:>10}\n", "word", "n_t", "log2 p", "PP"));
    for w in &report.words {
        out.push_str(&format!(
            "{:<width$}  {:>4}  {:>10}  {:>10}\n",
            w.word,
            w.n_t,
            opt_sig(&w.log2_p, 4),
            opt_sig(&w.perplexity, 4),
        ));
    }
    out.push('\n');
    out.push_str(&format!("corpus perplexity:    {}\n", opt_sig(&report.corpus_perplexity, 4)));
    out.push_str(&format!("mean word perplexity: {}\n", opt_sig(&report.mean_word_perplexity, 4)));
    if report.has_impossible_words {
        out.push_str("warning: some words were assigned probability zero\n");
    }
    out
}

/// Render a report in the requested format. The JSON form round-trips
/// through serde unchanged.
pub fn render_report(report: &PerplexityReport, format: FormatArg) -> Result<String> {
    match format {
        FormatArg::Json => {
            let body = serde_json::to_string_pretty(report)
                .map_err(|e| Error::Internal(format!("report serialization: {e}")))?;
            Ok(format!("{body}\n"))
        }
        FormatArg::Csv => Ok(csv_text(report)),
        FormatArg::Human => Ok(human_text(report)),
    }
}

/// Write to the path when given, otherwise standard out.
pub fn deliver(text: &str, out: Option<&std::path::PathBuf>) -> Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
