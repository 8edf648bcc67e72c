//! Epoch loop with block-to-block state carry, validation-driven learning
//! rate annealing, and best-model checkpointing.
//!
//! Protocol per epoch: visit blocks in order, carrying each batch row's
//! hidden state (detached) from block to block and resetting to the learned
//! initial state at the epoch boundary; one SGD step per block. After every
//! epoch the validation perplexity decides annealing: no strict improvement
//! over the best seen divides the learning rate by `anneal_divisor`. The
//! returned model is the checkpoint from the best validation epoch, not the
//! last one.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{BlockSet, Level, Mode, SymbolSequence};
use crate::error::{Error, Result};
use crate::eval::annotated_perplexity;
use crate::lstm::{save_model, sequence_nll, BlockInit, ModelParams};
use crate::nncore::{sgd_step, RngStream};

/// RNG substream stage for per-epoch dropout draws.
const STAGE_DROPOUT: u64 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub block_len: usize,
    pub lr_init: f64,
    pub anneal_divisor: f64,
    pub clip_norm: Option<f64>,
    pub p_d: f64,
    pub n_h: usize,
    pub n_e: usize,
    pub seed: u64,
    /// Best-model file, rewritten (atomically) whenever validation improves.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 20,
            block_len: 35,
            lr_init: 1.0,
            anneal_divisor: 4.0,
            clip_norm: Some(5.0),
            p_d: 0.2,
            n_h: 256,
            n_e: 256,
            seed: 42,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    /// Reference block lengths: 35/70 for word baseline/salm, 217/265 for
    /// char baseline/salm. Tag symbols count toward the block length, which
    /// is why the salm figures exceed their baselines.
    pub fn reference_block_len(level: Level, mode: Mode) -> usize {
        match (level, mode) {
            (Level::Word, Mode::Baseline) => 35,
            (Level::Word, Mode::Salm) => 70,
            (Level::Char, Mode::Baseline) => 217,
            (Level::Char, Mode::Salm) => 265,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.lr_init > 0.0) {
            return Err(Error::InvalidConfig(format!("lr_init must be positive, got {}", self.lr_init)));
        }
        if !(self.anneal_divisor > 1.0) {
            return Err(Error::InvalidConfig(format!(
                "anneal_divisor must exceed 1, got {}",
                self.anneal_divisor
            )));
        }
        if self.batch_size == 0 || self.block_len == 0 {
            return Err(Error::InvalidConfig("batch_size and block_len must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_ppl: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best_val_ppl(&self) -> f64 {
        self.epochs[self.best_epoch].val_ppl
    }

    /// One JSON record per line, one line per epoch.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for record in &self.epochs {
            out.push_str(&serde_json::to_string(record).expect("record serializes"));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// One pass over all blocks in order. Returns the mean training loss
/// (nats per symbol). The caller supplies the per-epoch dropout stream.
pub fn train_epoch(
    model: &mut ModelParams,
    blocks: &BlockSet,
    lr: f64,
    clip_norm: Option<f64>,
    rng: &mut RngStream,
) -> Result<f64> {
    if blocks.blocks.is_empty() {
        return Err(Error::InsufficientData { required: 1, available: 0 });
    }
    model.zero_grads();
    let mut carried = None;
    let mut total = 0.0;
    for block in &blocks.blocks {
        let init = match &carried {
            None => BlockInit::LearnedInit,
            Some(states) => BlockInit::Carried(states),
        };
        let loss = sequence_nll(model, block, init, Some(rng), true)?;
        total += loss.mean_nll;
        sgd_step(&mut model.param_tensors(), lr, clip_norm)
            .map_err(|e| Error::Numeric(format!("block {}: {e}", block.index)))?;
        carried = Some(loss.final_states);
    }
    Ok(total / blocks.blocks.len() as f64)
}

/// Full training run: epoch loop, annealing, best-model selection.
/// Returns the best-validation model and the per-epoch history.
pub fn fit(
    model: ModelParams,
    blocks: &BlockSet,
    validation: &[SymbolSequence],
    config: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    config.validate()?;
    if validation.is_empty() {
        return Err(Error::InvalidConfig("validation set is empty".into()));
    }
    let mut current = model;
    let mut best: Option<(ModelParams, f64, usize)> = None;
    let mut lr = config.lr_init;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = RngStream::substream(config.seed, STAGE_DROPOUT, epoch as u64);
        let train_loss = train_epoch(&mut current, blocks, lr, config.clip_norm, &mut rng)?;
        let report = annotated_perplexity(&current, validation)?;
        let val_ppl = report.corpus_perplexity.unwrap_or(f64::INFINITY);
        history.push(EpochRecord { epoch, lr, train_loss, val_ppl });
        let improved = match &best {
            None => true,
            Some((_, best_ppl, _)) => val_ppl < *best_ppl,
        };
        if improved {
            if let Some(path) = &config.checkpoint {
                save_model(&current, path)?;
            }
            best = Some((current.clone(), val_ppl, epoch));
        } else {
            lr /= config.anneal_divisor;
        }
    }
    let (best_model, _, best_epoch) = best.expect("at least one epoch ran");
    Ok((best_model, TrainHistory { epochs: history, best_epoch }))
}

/// Annealing rule: the learning rate for the next epoch, given this
/// epoch's validation perplexity and the best seen before it.
pub fn next_lr(lr: f64, val_ppl: f64, best_ppl: f64, divisor: f64) -> f64 {
    if val_ppl < best_ppl {
        lr
    } else {
        lr / divisor
    }
}
