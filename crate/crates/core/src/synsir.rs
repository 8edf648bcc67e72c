//! Sequential importance resampling over latent tag prefixes.
//!
//! A tag-interleaved model defines P(symbols) over sequences where every
//! word is preceded by its tag. On plain text the tags are unobserved, so
//! the word-level predictive probability is a sum over all tag assignments,
//! which the recurrent state makes exponential to compute exactly. This
//! module estimates it with a particle filter: each particle carries one
//! sampled tag history and the model state that history produced. Per word,
//! each particle samples a tag, advances through the word's symbols, and
//! accrues a likelihood factor alpha; the predictive estimate is the
//! weight-averaged alpha, and resampling keeps the population concentrated
//! on plausible histories.
//!
//! The same weighted population doubles as an online tag posterior: the
//! weighted frequency of `tag_history[i]` estimates P(tag of word i | words
//! so far), and it keeps sharpening as later words arrive because surviving
//! histories carry their whole past.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{word_groups, Mode};
use crate::error::{Error, Result};
use crate::lstm::{Cursor, ModelParams};
use crate::nncore::RngStream;

/// Proposal distribution for the per-word tag draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// Sample tags from the model's own next-tag distribution. One model
    /// rollout per particle per word.
    #[default]
    Prior,
    /// Weight each candidate tag by the word likelihood it would produce
    /// before sampling. One rollout per tag per particle per word; lower
    /// estimator variance at proportionally higher cost.
    Optimal,
}

/// When to replace the weighted population with an equal-weight redraw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum ResamplePolicy {
    #[default]
    EveryWord,
    /// Resample only when at least `n_thresh` particles have weight below
    /// `gamma`. With `gamma` = 0 the condition never fires and the filter
    /// degenerates to pure sequential importance sampling.
    Threshold { gamma: f64, n_thresh: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynsirConfig {
    pub m: usize,
    pub kernel: Kernel,
    pub resample: ResamplePolicy,
    pub seed: u64,
}

impl Default for SynsirConfig {
    fn default() -> Self {
        SynsirConfig { m: 1000, kernel: Kernel::Prior, resample: ResamplePolicy::EveryWord, seed: 42 }
    }
}

impl SynsirConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::InvalidConfig("particle count m must be at least 1".into()));
        }
        if let ResamplePolicy::Threshold { gamma, .. } = self.resample {
            if !(0.0..1.0).contains(&gamma) {
                return Err(Error::InvalidConfig(format!(
                    "threshold gamma must lie in [0, 1), got {gamma}"
                )));
            }
        }
        Ok(())
    }
}

/// One hypothesis: a tag assignment for the words consumed so far, the
/// model state that assignment produced, and its normalized weight.
#[derive(Debug, Clone)]
pub struct Particle {
    pub tag_history: Vec<usize>,
    pub cursor: Cursor,
    pub weight: f64,
    /// Running sum of ln(alpha) over steps; diagnostic only.
    pub cum_log_like: f64,
}

/// The particle population plus resampling bookkeeping.
#[derive(Debug, Clone)]
pub struct ParticleSet {
    pub particles: Vec<Particle>,
    /// Parent index of each particle at the most recent resample; identity
    /// while no resample has happened since.
    pub ancestry: Vec<usize>,
}

impl ParticleSet {
    pub fn init(model: &ModelParams, m: usize) -> ParticleSet {
        let w = 1.0 / m as f64;
        let particles = (0..m)
            .map(|_| Particle {
                tag_history: Vec::new(),
                cursor: Cursor::sentence_start(model),
                weight: w,
                cum_log_like: 0.0,
            })
            .collect();
        ParticleSet { particles, ancestry: (0..m).collect() }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.weight).collect()
    }

    /// Effective sample size 1/sum(w^2): m when uniform, 1 when degenerate.
    pub fn ess(&self) -> f64 {
        1.0 / self.particles.iter().map(|p| p.weight * p.weight).sum::<f64>()
    }

    fn check_normalized(&self) -> Result<()> {
        let total: f64 = self.particles.iter().map(|p| p.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Internal(format!("particle weights sum to {total}, not 1")));
        }
        Ok(())
    }
}

/// Per-word filter output.
#[derive(Debug, Clone)]
pub struct WordStepResult {
    /// Per-particle incremental likelihood alpha_j.
    pub alpha: Vec<f64>,
    /// Per-particle raw tag-slot mass Z_j before renormalization.
    pub z: Vec<f64>,
    /// Estimated P(word | words so far), marginal over tags.
    pub p_hat: f64,
}

/// Tag distributions per consumed word position, in `vocab.tag_ids()` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagPosterior {
    pub per_position: Vec<Vec<f64>>,
}

/// The model's next-symbol distribution restricted to tag ids and
/// renormalized, plus the raw mass Z it carried. The model is trained so
/// that tag slots hold nearly all their mass on tags, but the softmax
/// leaks some onto other symbols; the caller folds Z into the importance
/// weight so estimates stay unbiased. `word_index` only labels the error
/// when every tag has zero mass.
pub fn tag_slot_distribution(
    model: &ModelParams,
    cursor: &Cursor,
    word_index: usize,
) -> Result<(Vec<f64>, f64)> {
    let (probs, _) = cursor.next_dist(model)?;
    let tag_ids = model.vocab.tag_ids();
    let masses: Vec<f64> = tag_ids.iter().map(|&t| probs[t]).collect();
    let z: f64 = masses.iter().sum();
    if z <= 0.0 {
        return Err(Error::DegenerateSlot { word_index });
    }
    Ok((masses.iter().map(|m| m / z).collect(), z))
}

/// Renormalized proposal over tags weighted by each tag's word likelihood:
/// pi(t) proportional to P(t | history) * P(word symbols | history, t).
/// Falls back to the renormalized prior when every product underflows to
/// zero (the particle is dead either way; the fallback keeps it shaped).
pub fn optimal_kernel(
    model: &ModelParams,
    particle: &Particle,
    word: &[usize],
    word_index: usize,
) -> Result<Vec<f64>> {
    let (prior, _z) = tag_slot_distribution(model, &particle.cursor, word_index)?;
    let (scored, total) = score_tags(model, particle, word, word_index)?;
    if total > 0.0 {
        Ok(scored.iter().map(|(mass, _)| mass / total).collect())
    } else {
        Ok(prior)
    }
}

/// Per tag: (raw tag mass * word likelihood, cursor advanced through tag
/// and word). The sum of the first components is the tag-marginal word
/// likelihood for this particle.
fn score_tags(
    model: &ModelParams,
    particle: &Particle,
    word: &[usize],
    word_index: usize,
) -> Result<(Vec<(f64, Cursor)>, f64)> {
    let (probs, _) = particle.cursor.next_dist(model)?;
    let tag_ids = model.vocab.tag_ids();
    let mut raw_z = 0.0;
    let mut scored = Vec::with_capacity(tag_ids.len());
    let mut total = 0.0;
    for &tag in tag_ids {
        let raw = probs[tag];
        raw_z += raw;
        let mut cursor = particle.cursor.clone();
        cursor.consume(model, tag)?;
        let mut like = 1.0;
        for &sym in word {
            like *= cursor.consume(model, sym)?;
        }
        let mass = raw * like;
        total += mass;
        scored.push((mass, cursor));
    }
    if raw_z <= 0.0 {
        return Err(Error::DegenerateSlot { word_index });
    }
    Ok((scored, total))
}

fn sample_index(weights: &[f64], rng: &mut RngStream) -> usize {
    let u = rng.next_f64();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Advance every particle through one word. Each particle samples a tag
/// from `kernel`, consumes `word` (lexical ids plus trailing boundary
/// symbol), and accrues alpha; weights are updated by the importance rule
/// w proportional to w_prev * alpha and renormalized. The returned p_hat
/// uses the weights from before the update. Per-particle randomness comes
/// from substreams of (seed, step, particle index), so results do not
/// depend on evaluation order.
pub fn propagate_word(
    model: &ModelParams,
    particles: &mut ParticleSet,
    word: &[usize],
    word_index: usize,
    kernel: Kernel,
    seed: u64,
    step: u64,
) -> Result<WordStepResult> {
    if word.is_empty() {
        return Err(Error::InvalidInput(format!("empty symbol group at word {word_index}")));
    }
    let w_prev = particles.weights();
    let mut alpha = Vec::with_capacity(particles.len());
    let mut z_out = Vec::with_capacity(particles.len());
    for (j, particle) in particles.particles.iter_mut().enumerate() {
        let mut rng = RngStream::substream(seed, step, j as u64);
        let (prior, z) = tag_slot_distribution(model, &particle.cursor, word_index)?;
        let tag_ids = model.vocab.tag_ids();
        let a = match kernel {
            Kernel::Prior => {
                let pick = sample_index(&prior, &mut rng);
                particle.tag_history.push(tag_ids[pick]);
                particle.cursor.consume(model, tag_ids[pick])?;
                let mut like = 1.0;
                for &sym in word {
                    like *= particle.cursor.consume(model, sym)?;
                }
                z * like
            }
            Kernel::Optimal => {
                let (scored, total) = score_tags(model, particle, word, word_index)?;
                let pick = if total > 0.0 {
                    let pi: Vec<f64> = scored.iter().map(|(mass, _)| mass / total).collect();
                    sample_index(&pi, &mut rng)
                } else {
                    sample_index(&prior, &mut rng)
                };
                particle.tag_history.push(tag_ids[pick]);
                particle.cursor = scored[pick].1.clone();
                total
            }
        };
        particle.cum_log_like += a.ln();
        alpha.push(a);
        z_out.push(z);
    }
    let p_hat = predictive_estimate(&alpha, &w_prev);
    let updated =
        updated_weights(&w_prev, &alpha).ok_or(Error::FilterCollapse { word_index })?;
    for (particle, w) in particles.particles.iter_mut().zip(updated) {
        particle.weight = w;
    }
    Ok(WordStepResult { alpha, z: z_out, p_hat })
}

/// The importance update: w_j proportional to w_prev_j * alpha_j,
/// renormalized. None when every product is zero (filter collapse).
pub fn updated_weights(w_prev: &[f64], alpha: &[f64]) -> Option<Vec<f64>> {
    let total: f64 = w_prev.iter().zip(alpha).map(|(w, a)| w * a).sum();
    if total <= 0.0 {
        return None;
    }
    Some(w_prev.iter().zip(alpha).map(|(w, a)| w * a / total).collect())
}

/// Marginal word probability estimate: sum of w_prev_j * alpha_j. With
/// uniform incoming weights this is the plain mean of alpha.
pub fn predictive_estimate(alpha: &[f64], incoming_weights: &[f64]) -> f64 {
    alpha.iter().zip(incoming_weights).map(|(a, w)| a * w).sum()
}

/// Replace the population with m multinomial draws proportional to weight.
/// States and histories are deep copies; `ancestry` records each draw's
/// parent index; all weights become 1/m.
pub fn resample(particles: &mut ParticleSet, rng: &mut RngStream) -> Result<()> {
    particles.check_normalized()?;
    let m = particles.len();
    let mut cdf = Vec::with_capacity(m);
    let mut acc = 0.0;
    for p in &particles.particles {
        acc += p.weight;
        cdf.push(acc);
    }
    let w = 1.0 / m as f64;
    let mut next = Vec::with_capacity(m);
    let mut ancestry = Vec::with_capacity(m);
    for _ in 0..m {
        let u = rng.next_f64() * acc;
        let k = cdf.partition_point(|&c| c <= u).min(m - 1);
        let mut p = particles.particles[k].clone();
        p.weight = w;
        next.push(p);
        ancestry.push(k);
    }
    particles.particles = next;
    particles.ancestry = ancestry;
    Ok(())
}

/// Weighted empirical distribution of `tag_history[position]` across the
/// population, in `vocab.tag_ids()` order. Estimates of past positions keep
/// improving as more words arrive, because each particle carries its whole
/// history.
pub fn tag_posterior_estimate(
    model: &ModelParams,
    particles: &ParticleSet,
    position: usize,
) -> Result<Vec<f64>> {
    let consumed = particles.particles.first().map_or(0, |p| p.tag_history.len());
    if position >= consumed {
        return Err(Error::IndexOutOfRange {
            index: position,
            len: consumed,
            what: "tag position".into(),
        });
    }
    let tag_ids = model.vocab.tag_ids();
    let index_of: BTreeMap<usize, usize> =
        tag_ids.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    let mut dist = vec![0.0; tag_ids.len()];
    for p in &particles.particles {
        dist[index_of[&p.tag_history[position]]] += p.weight;
    }
    Ok(dist)
}

fn posterior_snapshot(model: &ModelParams, particles: &ParticleSet) -> Result<TagPosterior> {
    let consumed = particles.particles.first().map_or(0, |p| p.tag_history.len());
    let per_position = (0..consumed)
        .map(|i| tag_posterior_estimate(model, particles, i))
        .collect::<Result<_>>()?;
    Ok(TagPosterior { per_position })
}

fn should_resample(policy: ResamplePolicy, weights: &[f64]) -> bool {
    match policy {
        ResamplePolicy::EveryWord => true,
        ResamplePolicy::Threshold { gamma, n_thresh } => {
            weights.iter().filter(|&&w| w < gamma).count() >= n_thresh
        }
    }
}

/// Per-word record of a filter pass, shaped for JSON-lines emission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordRecord {
    pub index: usize,
    pub word: String,
    pub p_hat: f64,
    pub log2_p_hat: f64,
    /// Posterior over tag names for this word at the time it was consumed.
    pub posterior: BTreeMap<String, f64>,
    pub ess: f64,
}

/// Full output of a filter pass over one sentence.
#[derive(Debug, Clone)]
pub struct SynsirRun {
    pub words: Vec<String>,
    pub records: Vec<WordRecord>,
    /// Posterior table over all consumed positions after each word; the
    /// last snapshot is the smoothed table for the whole sentence.
    pub snapshots: Vec<TagPosterior>,
    pub particles: ParticleSet,
}

fn named_posterior(model: &ModelParams, dist: &[f64]) -> BTreeMap<String, f64> {
    model
        .vocab
        .tag_ids()
        .iter()
        .zip(dist)
        .map(|(&t, &p)| (model.vocab.text(t).to_string(), p))
        .collect()
}

/// Run the filter over one plain-text sentence: lowercase, whitespace-split,
/// estimate each word's marginal probability and tag posterior. The final
/// word's boundary symbol is end-of-sentence, so the p_hat values multiply
/// to a whole-sentence probability estimate.
pub fn run(model: &ModelParams, text: &str, config: &SynsirConfig) -> Result<SynsirRun> {
    config.validate()?;
    if model.mode != Mode::Salm {
        return Err(Error::InvalidConfig("filter needs a model with tag symbols".into()));
    }
    let words: Vec<String> = text.to_lowercase().split_whitespace().map(String::from).collect();
    if words.is_empty() {
        return Err(Error::InvalidInput("no words in input text".into()));
    }
    let refs: Vec<&str> = words.iter().map(String::as_str).collect();
    let groups = word_groups(&refs, &model.vocab, true)?;
    let mut particles = ParticleSet::init(model, config.m);
    let mut records = Vec::with_capacity(words.len());
    let mut snapshots = Vec::with_capacity(words.len());
    for (i, group) in groups.iter().enumerate() {
        let result =
            propagate_word(model, &mut particles, group, i, config.kernel, config.seed, i as u64)?;
        let dist = tag_posterior_estimate(model, &particles, i)?;
        records.push(WordRecord {
            index: i,
            word: words[i].clone(),
            p_hat: result.p_hat,
            log2_p_hat: result.p_hat.log2(),
            posterior: named_posterior(model, &dist),
            ess: particles.ess(),
        });
        snapshots.push(posterior_snapshot(model, &particles)?);
        if should_resample(config.resample, &particles.weights()) {
            let mut rng = RngStream::substream(config.seed, i as u64, config.m as u64);
            resample(&mut particles, &mut rng)?;
        }
    }
    Ok(SynsirRun { words, records, snapshots, particles })
}

/// Incremental filter for word-at-a-time input. Every pushed word is
/// treated as mid-sentence (its boundary is a separator), so posteriors
/// condition on "text continues"; `finish` then consumes end-of-sentence.
/// A finished session conditions on one extra separator compared to
/// whole-sentence scoring, which knows the last word in advance.
pub struct SynsirSession<'m> {
    model: &'m ModelParams,
    config: SynsirConfig,
    particles: ParticleSet,
    words: Vec<String>,
    step: u64,
    finished: bool,
}

impl<'m> SynsirSession<'m> {
    pub fn new(model: &'m ModelParams, config: SynsirConfig) -> Result<Self> {
        config.validate()?;
        if model.mode != Mode::Salm {
            return Err(Error::InvalidConfig("filter needs a model with tag symbols".into()));
        }
        Ok(SynsirSession {
            model,
            config,
            particles: ParticleSet::init(model, config.m),
            words: Vec::new(),
            step: 0,
            finished: false,
        })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Consume one word (plus its separator) and return its record.
    pub fn push_word(&mut self, word: &str) -> Result<WordRecord> {
        if self.finished {
            return Err(Error::InvalidInput("session already finished".into()));
        }
        let surface = word.trim().to_lowercase();
        let group = word_groups(&[surface.as_str()], &self.model.vocab, false)?.remove(0);
        let index = self.words.len();
        let result = propagate_word(
            self.model,
            &mut self.particles,
            &group,
            index,
            self.config.kernel,
            self.config.seed,
            self.step,
        )?;
        self.step += 1;
        self.words.push(surface.clone());
        let dist = tag_posterior_estimate(self.model, &self.particles, index)?;
        let record = WordRecord {
            index,
            word: surface,
            p_hat: result.p_hat,
            log2_p_hat: result.p_hat.log2(),
            posterior: named_posterior(self.model, &dist),
            ess: self.particles.ess(),
        };
        if should_resample(self.config.resample, &self.particles.weights()) {
            let mut rng = RngStream::substream(self.config.seed, self.step - 1, self.config.m as u64);
            resample(&mut self.particles, &mut rng)?;
        }
        Ok(record)
    }

    /// The full posterior table over every word consumed so far.
    pub fn posterior_table(&self) -> Result<TagPosterior> {
        posterior_snapshot(self.model, &self.particles)
    }

    /// Close the sentence: every particle consumes end-of-sentence, weights
    /// update by its probability, and the estimate of P(end | words) is
    /// returned. No resampling afterwards.
    pub fn finish(&mut self) -> Result<f64> {
        if self.finished {
            return Err(Error::InvalidInput("session already finished".into()));
        }
        if self.words.is_empty() {
            return Err(Error::InvalidInput("no words pushed before finish".into()));
        }
        self.finished = true;
        let eos = self.model.vocab.eos();
        let w_prev = self.particles.weights();
        let mut alpha = Vec::with_capacity(self.particles.len());
        for particle in &mut self.particles.particles {
            let p = particle.cursor.consume(self.model, eos)?;
            particle.cum_log_like += p.ln();
            alpha.push(p);
        }
        let p_hat = predictive_estimate(&alpha, &w_prev);
        let updated = updated_weights(&w_prev, &alpha)
            .ok_or(Error::FilterCollapse { word_index: self.words.len() })?;
        for (particle, w) in self.particles.particles.iter_mut().zip(updated) {
            particle.weight = w;
        }
        Ok(p_hat)
    }

    pub fn particles(&self) -> &ParticleSet {
        &self.particles
    }
}
