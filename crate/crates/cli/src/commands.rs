//! Subcommand implementations. Machine-readable results go to standard
//! out; progress and diagnostics go to standard error.

use std::collections::BTreeMap;
use std::io::{IsTerminal, Read};
use std::path::PathBuf;

use salm_core::corpus::{
    load_plain_corpus, load_tagged_corpus, make_blocks, render_sequence, split_corpus, CorpusFormat,
    Mode, SymbolSequence, TaggedSentence, Vocabulary,
};
use salm_core::demo;
use salm_core::eval::{generate, run_sweep, score_text, ExperimentConfig, ScoreEstimator, SWEEP_CSV_HEADER};
use salm_core::lstm::{load_model, save_model, ModelParams};
use salm_core::nncore::RngStream;
use salm_core::oracle::{exact_posteriors, exact_predictive, grad_check, gradcheck_case};
use salm_core::synsir::{SynsirRun, SynsirSession};
use salm_core::train::fit;
use salm_core::{Error, Result};

use crate::config::{CliConfig, EstimatorArg};
use crate::report::{deliver, format_sig, render_report};

fn load_conll(path: &PathBuf) -> Result<Vec<TaggedSentence>> {
    load_tagged_corpus(path, CorpusFormat::Conll2Col)
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Internal(format!("json rendering: {e}")))?;
    println!("{body}");
    Ok(())
}

pub fn print_config(config: &CliConfig) -> Result<()> {
    print_json(&config.dump())
}

// --- demo-corpus ---

pub fn demo_corpus(config: &CliConfig, sentences: usize, plain: bool, out: Option<&PathBuf>) -> Result<()> {
    let corpus = demo::sample_corpus(sentences, config.seed);
    let text = if plain { demo::to_plain(&corpus) } else { demo::to_conll(&corpus) };
    deliver(&text, out)
}

// --- preprocess ---

pub fn preprocess(config: &CliConfig, preview: usize, out: Option<&PathBuf>) -> Result<()> {
    let path = config.corpus_required()?;
    let corpus = load_conll(path)?;
    let vocab = Vocabulary::build(&corpus, config.level, config.word_cap)?;

    let mut total_symbols = 0usize;
    let mut previews = Vec::new();
    for (i, sentence) in corpus.iter().enumerate() {
        let seq = render_sequence(sentence, &vocab, config.mode)?;
        total_symbols += seq.ids.len();
        if i < preview {
            previews.push(serde_json::json!({
                "surface": sentence.surfaces().collect::<Vec<_>>().join(" "),
                "symbols": seq.ids.iter().map(|&id| vocab.text(id)).collect::<Vec<_>>(),
            }));
        }
    }
    let total_words: usize = corpus.iter().map(|s| s.tokens.len()).sum();
    let unk = vocab.unk();
    let unk_words = corpus
        .iter()
        .flat_map(|s| s.tokens.iter())
        .filter(|(w, _)| vocab.encode_word(w).contains(&unk))
        .count();
    let tags: Vec<&str> = vocab.tag_ids().iter().map(|&t| vocab.text(t)).collect();

    let report = serde_json::json!({
        "corpus": path,
        "level": config.level.to_string(),
        "mode": config.mode.to_string(),
        "sentences": corpus.len(),
        "vocab": {
            "size": vocab.len(),
            "lexical": vocab.lexical_count(),
            "tags": tags,
        },
        "tokens": { "total_words": total_words, "unk_words": unk_words },
        "rendered": {
            "total_symbols": total_symbols,
            "mean_symbols_per_sentence": total_symbols as f64 / corpus.len().max(1) as f64,
        },
        "preview": previews,
    });
    let body = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Internal(format!("json rendering: {e}")))?;
    deliver(&format!("{body}\n"), out)
}

// --- train ---

pub fn train(config: &CliConfig, out: &PathBuf, history_path: Option<&PathBuf>) -> Result<()> {
    let path = config.corpus_required()?;
    let corpus = load_conll(path)?;
    let (train_slice, val_slice, _test_slice) = split_corpus(&corpus, config.val, config.test)?;
    let vocab = Vocabulary::build(train_slice, config.level, config.word_cap)?;
    let render = |s: &TaggedSentence| render_sequence(s, &vocab, config.mode);
    let train_seqs: Vec<SymbolSequence> = train_slice.iter().map(render).collect::<Result<_>>()?;
    let val_seqs: Vec<SymbolSequence> = val_slice.iter().map(render).collect::<Result<_>>()?;

    let train_config = config.train_config(Some(out.clone()));
    let blocks = make_blocks(&train_seqs, train_config.batch_size, train_config.block_len)?;
    eprintln!(
        "training {}-{} on {} sentences ({} blocks of {}x{}), validating on {}",
        config.level,
        config.mode,
        train_slice.len(),
        blocks.blocks.len(),
        train_config.batch_size,
        train_config.block_len,
        val_slice.len(),
    );

    let mut rng = RngStream::new(config.seed);
    let model = ModelParams::new(vocab, config.mode, config.n_h, config.n_e, config.dropout, &mut rng)?;
    let (best, history) = fit(model, &blocks, &val_seqs, &train_config)?;
    for record in &history.epochs {
        eprintln!(
            "epoch {:>3}: lr {:<8} train nll {:.4}  val ppl {}",
            record.epoch,
            record.lr,
            record.train_loss,
            format_sig(record.val_ppl, 6),
        );
    }
    save_model(&best, out)?;
    if let Some(hp) = history_path {
        history.write_jsonl(hp)?;
    }
    print_json(&serde_json::json!({
        "model": out,
        "epochs_run": history.epochs.len(),
        "best_epoch": history.best_epoch,
        "best_val_perplexity": history.best_val_ppl(),
        "history": history_path,
    }))
}

// --- score ---

fn read_text(input: Option<&PathBuf>) -> Result<String> {
    match input {
        Some(path) if path.as_os_str() != "-" => {
            Ok(load_plain_corpus(path)?.join("\n"))
        }
        _ => {
            let mut text = String::new();
            std::io::stdin()
                .read_to_string(&mut text)
                .map_err(|e| Error::io("<stdin>", e))?;
            Ok(text)
        }
    }
}

pub fn score(config: &CliConfig, model_path: &PathBuf, input: Option<&PathBuf>, out: Option<&PathBuf>) -> Result<()> {
    let model = load_model(model_path)?;
    let text = read_text(input)?;
    let estimator = match (config.estimator, model.mode) {
        (EstimatorArg::Direct, _) => ScoreEstimator::Direct,
        (EstimatorArg::Synsir, _) => ScoreEstimator::Synsir(config.synsir_config()),
        (EstimatorArg::Auto, Mode::Baseline) => ScoreEstimator::Direct,
        (EstimatorArg::Auto, Mode::Salm) => ScoreEstimator::Synsir(config.synsir_config()),
    };
    let report = score_text(&model, &text, &estimator)?;
    deliver(&render_report(&report, config.format)?, out)
}

// --- posterior ---

fn posterior_names(model: &ModelParams, dist: &[f64]) -> BTreeMap<String, f64> {
    model
        .vocab
        .tag_ids()
        .iter()
        .zip(dist)
        .map(|(&t, &p)| (model.vocab.text(t).to_string(), p))
        .collect()
}

fn print_posterior_lines(model: &ModelParams, run: &SynsirRun, smoothed: bool) -> Result<()> {
    for record in &run.records {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Internal(format!("record serialization: {e}")))?;
        println!("{line}");
    }
    if smoothed {
        let table = run.snapshots.last().ok_or_else(|| Error::Internal("no snapshots".into()))?;
        let rows: Vec<serde_json::Value> = run
            .words
            .iter()
            .zip(&table.per_position)
            .map(|(w, dist)| serde_json::json!({ "word": w, "posterior": posterior_names(model, dist) }))
            .collect();
        println!(
            "{}",
            serde_json::to_string(&serde_json::json!({ "smoothed": rows }))
                .map_err(|e| Error::Internal(format!("snapshot serialization: {e}")))?
        );
    }
    Ok(())
}

fn print_posterior_table(model: &ModelParams, session: &SynsirSession, word: &str, index: usize) -> Result<()> {
    let table = session.posterior_table()?;
    let tags: Vec<&str> = model.vocab.tag_ids().iter().map(|&t| model.vocab.text(t)).collect();
    let width = session.words().iter().map(|w| w.len()).max().unwrap_or(4).max(4);
    println!("after {:?} (word {}):", word, index + 1);
    print!("  {:<width$}", "word");
    for t in &tags {
        print!("  {t:>7}");
    }
    println!();
    for (w, dist) in session.words().iter().zip(&table.per_position) {
        print!("  {w:<width$}");
        for p in dist {
            print!("  {p:>7.4}");
        }
        println!();
    }
    println!();
    Ok(())
}

fn interactive_posterior(config: &CliConfig, model: &ModelParams) -> Result<()> {
    let mut session = SynsirSession::new(model, config.synsir_config())?;
    let tty = std::io::stdin().is_terminal();
    if tty {
        eprintln!("type a sentence; the table refreshes after every completed word (ctrl-d to finish)");
    }
    let stdin = std::io::stdin();
    let mut lock = stdin.lock();
    let mut buf = [0u8; 4096];
    let mut pending: Vec<u8> = Vec::new();
    let mut total_log2 = 0.0;
    let feed = |session: &mut SynsirSession, bytes: &mut Vec<u8>, total: &mut f64| -> Result<()> {
        let word = String::from_utf8_lossy(bytes).to_string();
        bytes.clear();
        let record = session.push_word(&word)?;
        *total += record.log2_p_hat;
        print_posterior_table(model, session, &record.word, record.index)
    };
    loop {
        let n = lock.read(&mut buf).map_err(|e| Error::io("<stdin>", e))?;
        if n == 0 {
            break;
        }
        for &b in &buf[..n] {
            // ASCII whitespace never occurs inside a UTF-8 sequence, so
            // byte-level splitting is safe
            if b.is_ascii_whitespace() {
                if !pending.is_empty() {
                    feed(&mut session, &mut pending, &mut total_log2)?;
                }
            } else {
                pending.push(b);
            }
        }
        if tty && !pending.is_empty() {
            eprintln!("[pending word: {}]", String::from_utf8_lossy(&pending));
        }
    }
    if !pending.is_empty() {
        feed(&mut session, &mut pending, &mut total_log2)?;
    }
    if !session.words().is_empty() {
        let p_end = session.finish()?;
        total_log2 += p_end.log2();
        println!("P(end | words) = {}", format_sig(p_end, 4));
        println!("sentence log2 probability: {}", format_sig(total_log2, 6));
    }
    Ok(())
}

pub fn posterior(
    config: &CliConfig,
    model_path: &PathBuf,
    words: &[String],
    interactive: bool,
    smoothed: bool,
) -> Result<()> {
    let model = load_model(model_path)?;
    if interactive {
        return interactive_posterior(config, &model);
    }
    if words.is_empty() {
        return Err(Error::InvalidConfig("no sentence given (pass words or --interactive)".into()));
    }
    let sentence = words.join(" ");
    let run = salm_core::synsir::run(&model, &sentence, &config.synsir_config())?;
    print_posterior_lines(&model, &run, smoothed)
}

// --- generate ---

pub fn generate_cmd(config: &CliConfig, model_path: &PathBuf, seed_text: &str, count: usize) -> Result<()> {
    let model = load_model(model_path)?;
    let mut rng = RngStream::new(config.seed);
    for _ in 0..count {
        let sample = generate(&model, seed_text, config.max_symbols, config.temperature, &mut rng)?;
        println!("{}", sample.text);
    }
    Ok(())
}

// --- sweep ---

pub fn sweep(config: &CliConfig, out: Option<&PathBuf>) -> Result<()> {
    let corpus = config.corpus_required()?.clone();
    let out_csv = out.cloned().unwrap_or_else(|| PathBuf::from("sweep.csv"));
    let experiment = ExperimentConfig {
        corpus,
        n_list: config.n_list.clone(),
        variants: config.variants.clone(),
        train: config.sweep_train_config(),
        synsir: config.synsir_config(),
        val_sentences: config.val,
        test_sentences: config.test,
        word_cap: config.word_cap,
        out_csv: out_csv.clone(),
    };
    eprintln!(
        "sweep: {} sizes x {} variants -> {}",
        experiment.n_list.len(),
        experiment.variants.len(),
        out_csv.display(),
    );
    let rows = run_sweep(&experiment)?;
    println!("{SWEEP_CSV_HEADER}");
    for row in &rows {
        println!("{}", row.to_csv());
    }
    Ok(())
}

// --- oracle ---

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum OracleWhat {
    Predictive,
    Posteriors,
    Both,
}

pub fn oracle(config: &CliConfig, model_path: &PathBuf, words: &[String], what: OracleWhat) -> Result<()> {
    if words.is_empty() {
        return Err(Error::InvalidConfig("no sentence given".into()));
    }
    let model = load_model(model_path)?;
    let budget = config.enumeration_budget();
    let refs: Vec<&str> = words.iter().map(String::as_str).collect();
    let tags: Vec<&str> = model.vocab.tag_ids().iter().map(|&t| model.vocab.text(t)).collect();

    let mut out = serde_json::json!({ "words": words, "tags": tags });
    let map = out.as_object_mut().expect("object literal");
    if matches!(what, OracleWhat::Predictive | OracleWhat::Both) {
        let pred = exact_predictive(&model, &refs, &budget)?;
        map.insert(
            "predictive".into(),
            serde_json::json!({
                "conditionals": pred.conditionals,
                "log2_conditionals": pred.conditionals.iter().map(|p| p.log2()).collect::<Vec<_>>(),
                "sentence_log2_prob": pred.sentence_log_prob() / std::f64::consts::LN_2,
            }),
        );
    }
    if matches!(what, OracleWhat::Posteriors | OracleWhat::Both) {
        let post = exact_posteriors(&model, &refs, &budget)?;
        map.insert("posteriors".into(), serde_json::json!(post));
    }
    print_json(&out)
}

// --- gradcheck ---

pub fn gradcheck(config: &CliConfig, models: usize, eps: f64, tol: f64) -> Result<()> {
    let mut worst: f64 = 0.0;
    for index in 0..models {
        let (model, block) = gradcheck_case(index as u64, config.seed)?;
        let report = grad_check(&model, &block, eps)?;
        println!(
            "case {index:>2}: {}-{} n_h {}  max rel err {:.3e}  ({}[{}], {} coords)",
            model.vocab.level(),
            model.mode,
            model.n_h,
            report.max_rel_err,
            report.worst_tensor,
            report.worst_index,
            report.coords_checked,
        );
        worst = worst.max(report.max_rel_err);
    }
    if worst < tol {
        println!("PASS: max relative error {worst:.3e} < {tol:.1e} over {models} models");
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed: max relative error {worst:.3e} >= {tol:.1e}"
        )))
    }
}
