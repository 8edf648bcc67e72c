//! Perplexity reports, plain-text scoring, generation, and the training
//! sweep.
//!
//! Perplexity convention: each word is a group of symbol log-probabilities.
//! At char level a word's unit count n_t is its character count plus one
//! (its boundary symbol); at word level n_t = 1. A tag-prefix term folded
//! into a group raises its probability mass but never its unit count, so
//! baseline and tag-prefixed models are compared on the same denominator.
//! The corpus figure is the length-weighted geometric mean, i.e. two raised
//! to the negative total log2 probability over total units; the unweighted
//! mean of per-word perplexities is reported alongside it.

use std::fmt;
use std::io::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    load_tagged_corpus, make_blocks, render_sequence, split_corpus, word_groups, CorpusFormat,
    Level, Mode, SymbolKind, SymbolSequence, TaggedSentence, Vocabulary,
};
use crate::error::{Error, Result};
use crate::lstm::{Cursor, ModelParams};
use crate::nncore::RngStream;
use crate::synsir::{self, SynsirConfig};
use crate::train::{fit, TrainConfig, TrainHistory};

/// Per-symbol log2 probabilities for one word. A leading tag-slot term may
/// be folded in; it contributes probability, not units.
#[derive(Debug, Clone)]
pub struct WordLogProbs {
    pub word: String,
    pub log2_probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Direct,
    Synsir,
}

/// One scored word. `log2_p` and `perplexity` are None when the model
/// assigned the word probability zero.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WordScore {
    pub word: String,
    pub n_t: usize,
    pub log2_p: Option<f64>,
    pub perplexity: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PerplexityReport {
    pub model_id: String,
    pub level: Level,
    pub mode: Mode,
    pub estimator: Estimator,
    pub words: Vec<WordScore>,
    /// 2^(-total log2 p / total n_t); None when any word is impossible.
    pub corpus_perplexity: Option<f64>,
    /// Unweighted mean of per-word perplexities; None when any is infinite.
    pub mean_word_perplexity: Option<f64>,
    pub has_impossible_words: bool,
}

/// Eq-style per-word perplexity: 2^(-log2_p / n_t).
pub fn word_perplexity(log2_p: f64, n_t: usize) -> f64 {
    (2.0f64).powf(-log2_p / n_t as f64)
}

fn units_for(word: &str, level: Level) -> usize {
    match level {
        Level::Word => 1,
        Level::Char => word.chars().count() + 1,
    }
}

/// Assemble a report from per-word grouped log-probabilities.
pub fn perplexity(words: &[WordLogProbs], level: Level) -> Result<PerplexityReport> {
    let mut scores = Vec::with_capacity(words.len());
    let mut total_log2 = 0.0;
    let mut total_units = 0usize;
    let mut impossible = false;
    for w in words {
        if w.word.is_empty() {
            return Err(Error::InvalidInput("cannot score an empty word".into()));
        }
        let mut log2_p = 0.0;
        for &lp in &w.log2_probs {
            if lp.is_nan() || lp > 0.0 {
                return Err(Error::InvalidInput(format!("bad log2 probability {lp} for word {:?}", w.word)));
            }
            log2_p += lp;
        }
        let n_t = units_for(&w.word, level);
        if log2_p == f64::NEG_INFINITY {
            impossible = true;
            scores.push(WordScore { word: w.word.clone(), n_t, log2_p: None, perplexity: None });
        } else {
            total_log2 += log2_p;
            scores.push(WordScore {
                word: w.word.clone(),
                n_t,
                log2_p: Some(log2_p),
                perplexity: Some(word_perplexity(log2_p, n_t)),
            });
        }
        total_units += n_t;
    }
    let corpus = if impossible || total_units == 0 {
        None
    } else {
        Some((2.0f64).powf(-total_log2 / total_units as f64))
    };
    let mean = if impossible || scores.is_empty() {
        None
    } else {
        Some(scores.iter().filter_map(|s| s.perplexity).sum::<f64>() / scores.len() as f64)
    };
    Ok(PerplexityReport {
        model_id: String::new(),
        level,
        mode: Mode::Baseline,
        estimator: Estimator::Direct,
        words: scores,
        corpus_perplexity: corpus,
        mean_word_perplexity: mean,
        has_impossible_words: impossible,
    })
}

/// Stream one rendered sequence through the model and group the per-symbol
/// log2 probabilities by word: each tag-slot term is folded into the word
/// it prefixes, and the final EOS into the last word. Empty sentences
/// (EOS-only renderings) produce no groups.
pub fn annotated_word_logprobs(model: &ModelParams, seq: &SymbolSequence) -> Result<Vec<WordLogProbs>> {
    let vocab = &model.vocab;
    let mut groups: Vec<WordLogProbs> = seq
        .word_spans
        .iter()
        .map(|&(a, b)| WordLogProbs { word: vocab.decode_span(&seq.ids[a..b]), log2_probs: Vec::new() })
        .collect();
    if groups.is_empty() {
        return Ok(groups);
    }
    // position -> owning group: spans own their range, a tag owns the next
    // span's group, EOS the last group
    let mut owner = vec![groups.len() - 1; seq.ids.len()];
    for (k, &(a, b)) in seq.word_spans.iter().enumerate() {
        for pos in a..b {
            owner[pos] = k;
        }
        if a > 0 && vocab.kind(seq.ids[a - 1]) == SymbolKind::Tag {
            owner[a - 1] = k;
        }
    }
    let mut cursor = Cursor::sentence_start(model);
    for (pos, &symbol) in seq.ids.iter().enumerate() {
        let p = cursor.consume(model, symbol)?;
        groups[owner[pos]].log2_probs.push(p.log2());
    }
    Ok(groups)
}

/// Corpus perplexity of rendered sequences by direct likelihood, each
/// sentence conditioned independently. This is the training loop's
/// validation metric.
pub fn annotated_perplexity(model: &ModelParams, seqs: &[SymbolSequence]) -> Result<PerplexityReport> {
    let mut all = Vec::new();
    for seq in seqs {
        all.extend(annotated_word_logprobs(model, seq)?);
    }
    let mut report = perplexity(&all, model.vocab.level())?;
    report.mode = model.mode;
    Ok(report)
}

/// How plain text gets scored: direct streaming likelihood (models without
/// tags) or the particle filter's marginal estimates (models with tags).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScoreEstimator {
    Direct,
    Synsir(SynsirConfig),
}

fn model_id(model: &ModelParams) -> String {
    format!(
        "{}-{}-nh{}-v{}",
        model.vocab.level(),
        model.mode,
        model.n_h,
        model.vocab.len()
    )
}

fn split_lines(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(|line| line.split_whitespace().map(|w| w.to_lowercase()).collect::<Vec<_>>())
        .filter(|words: &Vec<String>| !words.is_empty())
        .collect()
}

/// Score plain text, one sentence per line. Direct scoring walks the model
/// over each sentence's symbols; the filter estimator sums over latent tags
/// word by word. Either way each word contributes one grouped probability
/// (including its boundary symbol) to the report.
pub fn score_text(model: &ModelParams, text: &str, estimator: &ScoreEstimator) -> Result<PerplexityReport> {
    let sentences = split_lines(text);
    if sentences.is_empty() {
        return Err(Error::InvalidInput("no words in input text".into()));
    }
    let mut all: Vec<WordLogProbs> = Vec::new();
    let est = match estimator {
        ScoreEstimator::Direct => {
            if model.mode != Mode::Baseline {
                return Err(Error::InvalidConfig(
                    "direct scoring of plain text needs a model without tag prefixes; use the synsir estimator".into(),
                ));
            }
            for words in &sentences {
                let refs: Vec<&str> = words.iter().map(String::as_str).collect();
                let groups = word_groups(&refs, &model.vocab, true)?;
                let mut cursor = Cursor::sentence_start(model);
                for (word, group) in words.iter().zip(groups) {
                    let mut log2_probs = Vec::with_capacity(group.len());
                    for sym in group {
                        log2_probs.push(cursor.consume(model, sym)?.log2());
                    }
                    all.push(WordLogProbs { word: word.clone(), log2_probs });
                }
            }
            Estimator::Direct
        }
        ScoreEstimator::Synsir(config) => {
            if model.mode != Mode::Salm {
                return Err(Error::InvalidConfig(
                    "the synsir estimator needs a model with tag prefixes; use direct scoring".into(),
                ));
            }
            for words in &sentences {
                let line = words.join(" ");
                let out = synsir::run(model, &line, config)?;
                for rec in out.records {
                    all.push(WordLogProbs { word: rec.word, log2_probs: vec![rec.log2_p_hat] });
                }
            }
            Estimator::Synsir
        }
    };
    let mut report = perplexity(&all, model.vocab.level())?;
    report.model_id = model_id(model);
    report.mode = model.mode;
    report.estimator = est;
    Ok(report)
}

/// Sample an index from `probs` sharpened by `temperature`: weights are
/// p^(1/T), renormalized. T = 1 samples the distribution as-is; T = 0 is
/// the argmax limit; T < 0 is rejected.
pub fn sample_from(probs: &[f64], temperature: f64, rng: &mut RngStream) -> Result<usize> {
    if temperature < 0.0 || !temperature.is_finite() {
        return Err(Error::InvalidConfig(format!("temperature must be >= 0, got {temperature}")));
    }
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        return Ok(best);
    }
    // exponentiate in log space and shift by the max to avoid under/overflow
    let logs: Vec<f64> = probs.iter().map(|&p| p.ln() / temperature).collect();
    let hi = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|&l| (l - hi).exp()).collect();
    let total: f64 = weights.iter().sum();
    let u = rng.next_f64() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(weights.len() - 1)
}

/// Generated text plus the raw symbol trace behind it (tags and boundary
/// symbols included; the text has them stripped or rendered as spaces).
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub text: String,
    pub symbols: Vec<usize>,
}

fn append_symbol(text: &mut String, model: &ModelParams, symbol: usize) {
    let vocab = &model.vocab;
    match vocab.kind(symbol) {
        SymbolKind::Lexical | SymbolKind::Unk => {
            if vocab.level() == Level::Word && !text.is_empty() {
                text.push(' ');
            }
            text.push_str(vocab.text(symbol));
        }
        SymbolKind::Sep => text.push(' '),
        SymbolKind::Tag | SymbolKind::Eos => {}
    }
}

/// Ancestral sampling from the model. `seed_text` words are consumed first
/// (for tag-prefixed models their tag slots are sampled, since plain text
/// carries no tags); then up to `max_symbols` symbols are drawn, stopping
/// early at end-of-sentence. Tag symbols appear in the trace but not in
/// the text.
pub fn generate(
    model: &ModelParams,
    seed_text: &str,
    max_symbols: usize,
    temperature: f64,
    rng: &mut RngStream,
) -> Result<Generation> {
    let mut cursor = Cursor::sentence_start(model);
    let mut text = String::new();
    let words: Vec<String> = seed_text.split_whitespace().map(|w| w.to_lowercase()).collect();
    if !words.is_empty() {
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        let groups = word_groups(&refs, &model.vocab, false)?;
        for group in groups {
            if model.mode == Mode::Salm {
                let (probs, _) = cursor.next_dist(model)?;
                let tag_ids = model.vocab.tag_ids();
                let masses: Vec<f64> = tag_ids.iter().map(|&t| probs[t]).collect();
                let z: f64 = masses.iter().sum();
                if z <= 0.0 {
                    return Err(Error::Numeric("zero tag mass while consuming seed text".into()));
                }
                let renorm: Vec<f64> = masses.iter().map(|m| m / z).collect();
                let tag = tag_ids[sample_from(&renorm, temperature, rng)?];
                cursor.consume(model, tag)?;
            }
            for sym in group {
                cursor.consume(model, sym)?;
                append_symbol(&mut text, model, sym);
            }
        }
    }
    let mut symbols = Vec::new();
    for _ in 0..max_symbols {
        let (probs, _) = cursor.next_dist(model)?;
        let pick = sample_from(probs.as_slice().expect("contiguous distribution"), temperature, rng)?;
        cursor.consume(model, pick)?;
        symbols.push(pick);
        if pick == model.vocab.eos() {
            break;
        }
        append_symbol(&mut text, model, pick);
    }
    Ok(Generation { text: text.trim().to_string(), symbols })
}

/// One model variant of the experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Variant {
    pub level: Level,
    pub mode: Mode,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant { level: Level::Char, mode: Mode::Baseline },
        Variant { level: Level::Char, mode: Mode::Salm },
        Variant { level: Level::Word, mode: Mode::Baseline },
        Variant { level: Level::Word, mode: Mode::Salm },
    ];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.level, self.mode)
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Variant> {
        let (level, mode) = s
            .split_once('-')
            .ok_or_else(|| Error::InvalidConfig(format!("bad variant {s:?}, expected level-mode")))?;
        Ok(Variant { level: level.parse()?, mode: mode.parse()? })
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.to_string()
    }
}

/// The experiment grid: train each variant at each training-set size and
/// score the held-out test sentences.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Tagged corpus file (two-column format).
    pub corpus: PathBuf,
    /// Training-set sizes, strictly increasing.
    pub n_list: Vec<usize>,
    pub variants: Vec<Variant>,
    pub train: TrainConfig,
    pub synsir: SynsirConfig,
    /// Sentences held out from the end of the corpus: validation first,
    /// then test.
    pub val_sentences: usize,
    pub test_sentences: usize,
    /// Word-level vocabulary cap; ignored at char level.
    pub word_cap: usize,
    /// Results table (CSV); a sidecar with the full config is written next
    /// to it with a .json extension.
    pub out_csv: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_list.is_empty() || self.variants.is_empty() {
            return Err(Error::InvalidConfig("sweep needs at least one size and one variant".into()));
        }
        if !self.n_list.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidConfig(format!(
                "training sizes must be strictly increasing, got {:?}",
                self.n_list
            )));
        }
        if self.test_sentences == 0 || self.val_sentences == 0 {
            return Err(Error::InvalidConfig("sweep needs validation and test sentences".into()));
        }
        // block_len 0 means "per-variant reference length", resolved in
        // each cell; validate the rest against a stand-in
        let mut train = self.train.clone();
        if train.block_len == 0 {
            train.block_len = 1;
        }
        train.validate()?;
        self.synsir.validate()
    }
}

/// One sweep cell's outcome. Failed cells carry the error text in `status`
/// and empty metric columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: String,
    pub level: Level,
    pub mode: Mode,
    pub n: usize,
    pub test_ppl: Option<f64>,
    pub val_ppl: Option<f64>,
    pub best_epoch: Option<usize>,
    pub wall_seconds: f64,
    pub seed: u64,
    pub status: String,
}

pub const SWEEP_CSV_HEADER: &str =
    "variant,level,mode,N,test_ppl,val_ppl,best_epoch,wall_seconds,seed,status";

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt_num<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

impl SweepRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.3},{},{}",
            csv_field(&self.variant),
            self.level,
            self.mode,
            self.n,
            opt_num(&self.test_ppl),
            opt_num(&self.val_ppl),
            opt_num(&self.best_epoch),
            self.wall_seconds,
            self.seed,
            csv_field(&self.status),
        )
    }
}

struct CellOutcome {
    test_ppl: Option<f64>,
    val_ppl: Option<f64>,
    best_epoch: Option<usize>,
}

fn run_cell(
    train_slice: &[TaggedSentence],
    val_slice: &[TaggedSentence],
    test_text: &str,
    variant: Variant,
    config: &ExperimentConfig,
) -> Result<CellOutcome> {
    let vocab = Vocabulary::build(train_slice, variant.level, config.word_cap)?;
    let render = |s: &TaggedSentence| render_sequence(s, &vocab, variant.mode);
    let train_seqs: Vec<SymbolSequence> = train_slice.iter().map(render).collect::<Result<_>>()?;
    let val_seqs: Vec<SymbolSequence> = val_slice.iter().map(render).collect::<Result<_>>()?;
    let mut cfg = config.train.clone();
    if cfg.block_len == 0 {
        cfg.block_len = TrainConfig::reference_block_len(variant.level, variant.mode);
    }
    let blocks = make_blocks(&train_seqs, cfg.batch_size, cfg.block_len)?;
    let mut rng = RngStream::substream(cfg.seed, variant.level as u64 * 2 + variant.mode as u64, train_slice.len() as u64);
    let model = ModelParams::new(vocab, variant.mode, cfg.n_h, cfg.n_e, cfg.p_d, &mut rng)?;
    let (best, history): (ModelParams, TrainHistory) = fit(model, &blocks, &val_seqs, &cfg)?;
    let estimator = match variant.mode {
        Mode::Baseline => ScoreEstimator::Direct,
        Mode::Salm => ScoreEstimator::Synsir(config.synsir),
    };
    let report = score_text(&best, test_text, &estimator)?;
    let val_ppl = history.best_val_ppl();
    Ok(CellOutcome {
        test_ppl: report.corpus_perplexity,
        val_ppl: val_ppl.is_finite().then_some(val_ppl),
        best_epoch: Some(history.best_epoch),
    })
}

fn worker_count() -> usize {
    std::env::var("SALM_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Run the grid: for each training size and variant, train from scratch on
/// the first N training sentences and score the test split (direct scoring
/// for plain models, filter estimates for tag-prefixed ones). Rows append
/// to the CSV as cells finish, so a crash keeps completed work; failures
/// are recorded per row and do not stop the sweep. `SALM_WORKERS` runs that
/// many cells at a time; rows are written in grid order either way.
pub fn run_sweep(config: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let corpus = load_tagged_corpus(&config.corpus, CorpusFormat::Conll2Col)?;
    let max_n = *config.n_list.last().expect("validated non-empty");
    let needed = max_n + config.val_sentences + config.test_sentences;
    if corpus.len() < needed {
        return Err(Error::InsufficientData { required: needed, available: corpus.len() });
    }
    let (train_all, val_slice, test_slice) =
        split_corpus(&corpus, config.val_sentences, config.test_sentences)?;
    let test_text: String = test_slice
        .iter()
        .map(|s| s.surfaces().collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("\n");

    let sidecar = config.out_csv.with_extension("json");
    let sidecar_body = serde_json::to_string_pretty(config)
        .map_err(|e| Error::InvalidConfig(format!("unserializable config: {e}")))?;
    std::fs::write(&sidecar, sidecar_body)
        .map_err(|e| Error::io(sidecar.display().to_string(), e))?;
    let mut csv = std::fs::File::create(&config.out_csv)
        .map_err(|e| Error::io(config.out_csv.display().to_string(), e))?;
    writeln!(csv, "{SWEEP_CSV_HEADER}").map_err(|e| Error::io(config.out_csv.display().to_string(), e))?;

    let cells: Vec<(usize, Variant)> = config
        .n_list
        .iter()
        .flat_map(|&n| config.variants.iter().map(move |&v| (n, v)))
        .collect();
    let workers = worker_count();
    let mut rows = Vec::with_capacity(cells.len());
    for wave in cells.chunks(workers.max(1)) {
        let outcomes: Vec<(f64, Result<CellOutcome>)> = if workers <= 1 || wave.len() == 1 {
            wave.iter()
                .map(|&(n, variant)| {
                    let start = Instant::now();
                    let r = run_cell(&train_all[..n], val_slice, &test_text, variant, config);
                    (start.elapsed().as_secs_f64(), r)
                })
                .collect()
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|&(n, variant)| {
                        let train_all = &train_all;
                        let test_text = &test_text;
                        scope.spawn(move || {
                            let start = Instant::now();
                            let r = run_cell(&train_all[..n], val_slice, test_text, variant, config);
                            (start.elapsed().as_secs_f64(), r)
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
            })
        };
        for (&(n, variant), (wall, outcome)) in wave.iter().zip(outcomes) {
            let row = match outcome {
                Ok(cell) => SweepRow {
                    variant: variant.to_string(),
                    level: variant.level,
                    mode: variant.mode,
                    n,
                    test_ppl: cell.test_ppl,
                    val_ppl: cell.val_ppl,
                    best_epoch: cell.best_epoch,
                    wall_seconds: wall,
                    seed: config.train.seed,
                    status: "ok".into(),
                },
                Err(e) => SweepRow {
                    variant: variant.to_string(),
                    level: variant.level,
                    mode: variant.mode,
                    n,
                    test_ppl: None,
                    val_ppl: None,
                    best_epoch: None,
                    wall_seconds: wall,
                    seed: config.train.seed,
                    status: format!("error: {e}"),
                },
            };
            writeln!(csv, "{}", row.to_csv())
                .map_err(|e| Error::io(config.out_csv.display().to_string(), e))?;
            csv.flush().map_err(|e| Error::io(config.out_csv.display().to_string(), e))?;
            rows.push(row);
        }
    }
    Ok(rows)
}
