//! Brute-force references the fast paths are tested against: exact
//! marginalization over every tag assignment, exact smoothing posteriors,
//! and finite-difference gradient checking.
//!
//! There is deliberately no dynamic-programming shortcut here. The LSTM
//! state depends on the whole tag history, so the Markov factorization a
//! forward algorithm needs does not hold; enumeration is the only exact
//! method, and the budget caps it.

use crate::corpus::{word_groups, Mode};
use crate::error::{Error, Result};
use crate::lstm::{block_loss, sequence_nll, BlockInit, Cursor, ModelParams};
use crate::nncore::RngStream;

/// Hard limits on the tag-assignment enumeration, which is exponential in
/// sentence length by construction.
#[derive(Debug, Clone, Copy)]
pub struct EnumerationBudget {
    pub max_tagset: usize,
    pub max_words: usize,
}

impl Default for EnumerationBudget {
    fn default() -> Self {
        EnumerationBudget { max_tagset: 5, max_words: 8 }
    }
}

const MAX_PATHS: usize = 1_000_000;

impl EnumerationBudget {
    /// Path count for the given problem size, or a budget error.
    fn admit(&self, tagset: usize, words: usize) -> Result<usize> {
        let required = tagset.checked_pow(words.min(u32::MAX as usize) as u32).unwrap_or(usize::MAX);
        let allowed = self
            .max_tagset
            .checked_pow(self.max_words as u32)
            .unwrap_or(usize::MAX)
            .min(MAX_PATHS);
        if tagset > self.max_tagset || words > self.max_words || required > allowed {
            return Err(Error::BudgetExceeded { required, allowed });
        }
        Ok(required)
    }
}

/// Streaming log-sum-exp accumulator (running max with rescaling), so the
/// enumeration never materializes the per-path probability list.
#[derive(Debug, Clone, Copy)]
struct LogSumAcc {
    max: f64,
    sum: f64,
}

impl LogSumAcc {
    fn new() -> Self {
        LogSumAcc { max: f64::NEG_INFINITY, sum: 0.0 }
    }

    fn add(&mut self, log_term: f64) {
        if log_term == f64::NEG_INFINITY {
            return;
        }
        if log_term > self.max {
            self.sum = self.sum * (self.max - log_term).exp() + 1.0;
            self.max = log_term;
        } else {
            self.sum += (log_term - self.max).exp();
        }
    }

    fn log_total(&self) -> f64 {
        if self.sum == 0.0 {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

/// Exact per-word predictives from full enumeration.
#[derive(Debug, Clone)]
pub struct ExactPredictive {
    /// P(x_i | x_{0:i-1}) with tags marginalized out; the last word's value
    /// includes the end-of-sentence symbol.
    pub conditionals: Vec<f64>,
    /// ln of the prefix marginals M_i = P(x_{0:i}); conditionals are their
    /// successive ratios.
    pub log_marginals: Vec<f64>,
}

impl ExactPredictive {
    /// ln P of the whole sentence (tags marginalized, EOS included).
    pub fn sentence_log_prob(&self) -> f64 {
        *self.log_marginals.last().expect("at least one word")
    }
}

struct Enumeration<'m> {
    model: &'m ModelParams,
    groups: Vec<Vec<usize>>,
    tag_ids: Vec<usize>,
    /// log-domain prefix accumulators, one per word
    prefix: Vec<LogSumAcc>,
    /// independent linear-domain accumulators cross-checking `prefix`
    prefix_linear: Vec<f64>,
    /// full-path mass per (position, tag index): the smoothing posterior
    posterior: Vec<Vec<LogSumAcc>>,
    tag_stack: Vec<usize>,
}

impl<'m> Enumeration<'m> {
    fn run(
        model: &'m ModelParams,
        words: &[&str],
        budget: &EnumerationBudget,
        final_eos: bool,
    ) -> Result<Self> {
        if model.mode != Mode::Salm {
            return Err(Error::InvalidConfig("enumeration needs a model with tag symbols".into()));
        }
        if words.is_empty() {
            return Err(Error::InvalidInput("cannot enumerate an empty word sequence".into()));
        }
        let tag_ids = model.vocab.tag_ids().to_vec();
        budget.admit(tag_ids.len(), words.len())?;
        let groups = word_groups(words, &model.vocab, final_eos)?;
        let n = groups.len();
        let mut this = Enumeration {
            model,
            groups,
            tag_ids,
            prefix: vec![LogSumAcc::new(); n],
            prefix_linear: vec![0.0; n],
            posterior: vec![vec![LogSumAcc::new(); model.vocab.tag_ids().len()]; n],
            tag_stack: Vec::with_capacity(n),
        };
        this.descend(Cursor::sentence_start(model), 0.0, 1.0)?;
        this.cross_check()?;
        Ok(this)
    }

    /// DFS over tag assignments for words `depth..`. `log_p` and `linear_p`
    /// both track the probability of the interleaved prefix consumed so far;
    /// they are accumulated through independent code paths.
    fn descend(&mut self, cursor: Cursor, log_p: f64, linear_p: f64) -> Result<()> {
        let depth = self.tag_stack.len();
        if depth == self.groups.len() {
            for (pos, &tag_index) in self.tag_stack.iter().enumerate() {
                self.posterior[pos][tag_index].add(log_p);
            }
            return Ok(());
        }
        let (slot_probs, slot_state) = cursor.next_dist(self.model)?;
        for (tag_index, &tag_id) in self.tag_ids.clone().iter().enumerate() {
            let p_tag = slot_probs[tag_id];
            let mut log_q = log_p + p_tag.ln();
            let mut linear_q = linear_p * p_tag;
            let mut walk = Cursor { state: slot_state.clone(), last: tag_id };
            for &symbol in &self.groups[depth].clone() {
                let p = walk.consume(self.model, symbol)?;
                log_q += p.ln();
                linear_q *= p;
            }
            self.prefix[depth].add(log_q);
            self.prefix_linear[depth] += linear_q;
            if log_q > f64::NEG_INFINITY {
                self.tag_stack.push(tag_index);
                self.descend(walk, log_q, linear_q)?;
                self.tag_stack.pop();
            }
        }
        Ok(())
    }

    /// The two accumulation paths must agree; a gap means the rollout or
    /// one accumulator is broken.
    fn cross_check(&self) -> Result<()> {
        for (i, acc) in self.prefix.iter().enumerate() {
            let from_logs = acc.log_total().exp();
            let linear = self.prefix_linear[i];
            let scale = from_logs.abs().max(linear.abs()).max(f64::MIN_POSITIVE);
            if (from_logs - linear).abs() / scale > 1e-9 {
                return Err(Error::Internal(format!(
                    "enumeration accumulators disagree at word {i}: {from_logs} vs {linear}"
                )));
            }
        }
        Ok(())
    }

    fn predictive(&self) -> ExactPredictive {
        let log_marginals: Vec<f64> = self.prefix.iter().map(|a| a.log_total()).collect();
        let mut conditionals = Vec::with_capacity(log_marginals.len());
        let mut prev = 0.0;
        for &lm in &log_marginals {
            conditionals.push((lm - prev).exp());
            prev = lm;
        }
        ExactPredictive { conditionals, log_marginals }
    }

    fn posterior_at(&self, position: usize) -> Vec<f64> {
        let row = &self.posterior[position];
        let mut total = LogSumAcc::new();
        for acc in row {
            total.add(acc.log_total());
        }
        let log_total = total.log_total();
        row.iter().map(|acc| (acc.log_total() - log_total).exp()).collect()
    }
}

/// Exact P(x_i | x_{0:i-1}) for every word, marginalizing over all tag
/// assignments by direct model rollout. Exponential in sentence length;
/// guarded by `budget`.
pub fn exact_predictive(
    model: &ModelParams,
    words: &[&str],
    budget: &EnumerationBudget,
) -> Result<ExactPredictive> {
    Ok(Enumeration::run(model, words, budget, true)?.predictive())
}

/// Exact smoothing posterior P(y_position | all words) over tag ids, in
/// `vocab.tag_ids()` order.
pub fn exact_posterior(
    model: &ModelParams,
    words: &[&str],
    position: usize,
    budget: &EnumerationBudget,
) -> Result<Vec<f64>> {
    if position >= words.len() {
        return Err(Error::IndexOutOfRange { index: position, len: words.len(), what: "word position".into() });
    }
    Ok(Enumeration::run(model, words, budget, true)?.posterior_at(position))
}

/// Exact smoothing posteriors at every position, from one enumeration.
pub fn exact_posteriors(
    model: &ModelParams,
    words: &[&str],
    budget: &EnumerationBudget,
) -> Result<Vec<Vec<f64>>> {
    let e = Enumeration::run(model, words, budget, true)?;
    Ok((0..words.len()).map(|p| e.posterior_at(p)).collect())
}

/// Exact posteriors for a sentence prefix: the last word ends with a
/// separator instead of end-of-sentence, conditioning on "text continues".
/// This is the filtering-time reference for mid-sentence tag estimates.
pub fn exact_fragment_posteriors(
    model: &ModelParams,
    words: &[&str],
    budget: &EnumerationBudget,
) -> Result<Vec<Vec<f64>>> {
    let e = Enumeration::run(model, words, budget, false)?;
    Ok((0..words.len()).map(|p| e.posterior_at(p)).collect())
}

/// Worst finite-difference disagreement found by [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coords_checked: usize,
}

/// Coordinates sampled per tensor; small tensors are checked exhaustively.
const COORDS_PER_TENSOR: usize = 200;
/// Relative error denominators are floored here so coordinates whose true
/// gradient is at roundoff scale do not register as spurious failures.
const REL_ERR_FLOOR: f64 = 1e-6;

fn analytic_grads(model: &ModelParams, block: &crate::corpus::Block) -> Result<Vec<(String, Vec<f64>)>> {
    let mut probe = model.clone();
    probe.zero_grads();
    sequence_nll(&mut probe, block, BlockInit::LearnedInit, None, false)?;
    Ok(probe
        .param_tensors()
        .into_iter()
        .map(|(name, p)| (name.to_string(), p.grad().to_vec()))
        .collect())
}

fn fd_compare(
    model: &ModelParams,
    block: &crate::corpus::Block,
    eps: f64,
    grads: &[(String, Vec<f64>)],
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coords_checked: 0,
    };
    let mut rng = RngStream::substream(0x6f7261636c65, 0, 0);
    for (tensor_idx, (name, grad)) in grads.iter().enumerate() {
        let len = grad.len();
        let coords: Vec<usize> = if len <= COORDS_PER_TENSOR {
            (0..len).collect()
        } else {
            let mut seen = std::collections::BTreeSet::new();
            while seen.len() < COORDS_PER_TENSOR {
                seen.insert((rng.next_u64() as usize) % len);
            }
            seen.into_iter().collect()
        };
        for coord in coords {
            let mut probe = model.clone();
            {
                let mut tensors = probe.param_tensors();
                tensors[tensor_idx].1.value_mut()[coord] += eps;
            }
            let up = block_loss(&probe, block, BlockInit::LearnedInit)?;
            {
                let mut tensors = probe.param_tensors();
                tensors[tensor_idx].1.value_mut()[coord] -= 2.0 * eps;
            }
            let down = block_loss(&probe, block, BlockInit::LearnedInit)?;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grad[coord];
            if !numeric.is_finite() {
                return Err(Error::Numeric(format!("non-finite probe loss at {name}[{coord}]")));
            }
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_tensor = name.clone();
                report.worst_index = coord;
                report.worst_analytic = analytic;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Build the `index`-th randomized gradient-check case: a model small
/// enough for finite differences (vocab at most 8, n_h at most 4) and one
/// training block of at most 3x6 cells, dropout off. Level, mode, widths,
/// and block shape vary with the index.
pub fn gradcheck_case(index: u64, seed: u64) -> Result<(ModelParams, crate::corpus::Block)> {
    use crate::corpus::{make_blocks, parse_conll_2col, render_sequence, Level, Vocabulary};

    const STAGE_GRADCHECK: u64 = 11;
    let mut rng = RngStream::substream(seed, STAGE_GRADCHECK, index);
    let level = if rng.next_u64() % 2 == 0 { Level::Char } else { Level::Word };
    let mode = if rng.next_u64() % 2 == 0 { Mode::Baseline } else { Mode::Salm };
    let n_h = 2 + (rng.next_u64() % 3) as usize;
    let n_e = 2 + (rng.next_u64() % 3) as usize;
    let batch = 1 + (rng.next_u64() % 3) as usize;
    let block_len = 3 + (rng.next_u64() % 4) as usize;

    // chars {a, b} and two tags keep both vocabularies at 7-8 symbols
    let words = ["a", "b", "ab", "ba"];
    let tags = ["S", "T"];
    let mut text = String::new();
    for _ in 0..12 {
        let len = 1 + (rng.next_u64() % 3) as usize;
        for _ in 0..len {
            let w = words[(rng.next_u64() % 4) as usize];
            let t = tags[(rng.next_u64() % 2) as usize];
            text.push_str(w);
            text.push('\t');
            text.push_str(t);
            text.push('\n');
        }
        text.push('\n');
    }
    let corpus = parse_conll_2col(&text)?;
    let vocab = Vocabulary::build(&corpus, level, 4)?;
    let seqs = corpus
        .iter()
        .map(|s| render_sequence(s, &vocab, mode))
        .collect::<Result<Vec<_>>>()?;
    let blocks = make_blocks(&seqs, batch, block_len)?;
    let model = ModelParams::new(vocab, mode, n_h, n_e, 0.0, &mut rng)?;
    let block = blocks.blocks.into_iter().next().ok_or_else(|| {
        Error::Internal("gradcheck corpus produced no blocks".into())
    })?;
    Ok((model, block))
}

/// Compare the BPTT gradients against central finite differences of the
/// dropout-free block loss, over a sampled subset of coordinates of every
/// parameter tensor.
pub fn grad_check(model: &ModelParams, block: &crate::corpus::Block, eps: f64) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidConfig(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    let grads = analytic_grads(model, block)?;
    fd_compare(model, block, eps, &grads)
}
