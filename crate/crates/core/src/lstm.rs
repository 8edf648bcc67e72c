//! Two-layer LSTM language model: parameter container, single-step and
//! block forward passes, truncated BPTT, and the model file format.
//!
//! Step structure: the input symbol is embedded, dropout is applied, layer 1
//! and layer 2 cells run in sequence (no dropout between them), dropout is
//! applied to layer 2's output, and an affine projection plus softmax gives
//! the next-symbol distribution. Both initial state vectors of each layer
//! are learned parameters.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use sha2::{Digest, Sha256};

use crate::corpus::{Block, Level, Mode, SymbolEntry, SymbolKind, Vocabulary};
use crate::error::{Error, Result};
use crate::nncore::{
    affine, affine_backward, dropout, dropout_backward, sigmoid, sigmoid_grad,
    softmax_xent_backward, tanh, tanh_grad, DropoutMask, ParamTensor, Parameter, RngStream,
};

/// Gate weights and learned initial state for one layer. `w` maps the
/// concatenation [input; m_prev] to the stacked pre-activations
/// [i; j; f; o], each of width n_h.
#[derive(Debug, Clone)]
pub struct LstmLayer {
    pub w: Parameter<ndarray::Ix2>,
    pub b: Parameter<ndarray::Ix1>,
    pub init_m: Parameter<ndarray::Ix1>,
    pub init_c: Parameter<ndarray::Ix1>,
}

impl LstmLayer {
    fn new(input_width: usize, n_h: usize, scale: f64, rng: &mut RngStream) -> Self {
        LstmLayer {
            w: Parameter::uniform((4 * n_h, input_width + n_h), scale, rng),
            b: Parameter::zeros(4 * n_h),
            init_m: Parameter::zeros(n_h),
            init_c: Parameter::zeros(n_h),
        }
    }

    pub fn n_h(&self) -> usize {
        self.b.value.len() / 4
    }

    pub fn input_width(&self) -> usize {
        self.w.value.ncols() - self.n_h()
    }
}

/// All learned weights plus the configuration they depend on.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub vocab: Vocabulary,
    pub mode: Mode,
    pub n_h: usize,
    pub n_e: usize,
    pub p_d: f64,
    pub w_embed: Parameter<ndarray::Ix2>,
    pub layers: [LstmLayer; 2],
    pub w_out: Parameter<ndarray::Ix2>,
    pub b_out: Parameter<ndarray::Ix1>,
}

pub const INIT_SCALE: f64 = 0.1;

impl ModelParams {
    /// Fresh model with weights uniform on [-INIT_SCALE, INIT_SCALE] and
    /// zero initial states. Draw order is fixed: embedding, layer 1 gates,
    /// layer 2 gates, output projection.
    pub fn new(
        vocab: Vocabulary,
        mode: Mode,
        n_h: usize,
        n_e: usize,
        p_d: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if n_h == 0 || n_e == 0 {
            return Err(Error::InvalidConfig("n_h and n_e must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&p_d) {
            return Err(Error::InvalidConfig(format!("dropout probability {p_d} outside [0, 1)")));
        }
        if mode == Mode::Salm && vocab.tag_ids().is_empty() {
            return Err(Error::InvalidConfig("salm mode needs a vocabulary with tag symbols".into()));
        }
        let v = vocab.len();
        Ok(ModelParams {
            vocab,
            mode,
            n_h,
            n_e,
            p_d,
            w_embed: Parameter::uniform((v, n_e), INIT_SCALE, rng),
            layers: [
                LstmLayer::new(n_e, n_h, INIT_SCALE, rng),
                LstmLayer::new(n_h, n_h, INIT_SCALE, rng),
            ],
            w_out: Parameter::uniform((v, n_h), INIT_SCALE, rng),
            b_out: Parameter::zeros(v),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// State holding each layer's learned initial vectors.
    pub fn initial_state(&self) -> LstmState {
        LstmState {
            layers: [
                LayerState {
                    m: self.layers[0].init_m.value.clone(),
                    c: self.layers[0].init_c.value.clone(),
                },
                LayerState {
                    m: self.layers[1].init_m.value.clone(),
                    c: self.layers[1].init_c.value.clone(),
                },
            ],
        }
    }

    /// Every parameter tensor with a stable name, in serialization order.
    pub fn param_tensors(&mut self) -> Vec<(&'static str, &mut dyn ParamTensor)> {
        let [l1, l2] = &mut self.layers;
        vec![
            ("w_embed", &mut self.w_embed),
            ("layer1.w", &mut l1.w),
            ("layer1.b", &mut l1.b),
            ("layer1.init_m", &mut l1.init_m),
            ("layer1.init_c", &mut l1.init_c),
            ("layer2.w", &mut l2.w),
            ("layer2.b", &mut l2.b),
            ("layer2.init_m", &mut l2.init_m),
            ("layer2.init_c", &mut l2.init_c),
            ("w_out", &mut self.w_out),
            ("b_out", &mut self.b_out),
        ]
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.param_tensors() {
            for g in p.grad_mut() {
                *g = 0.0;
            }
        }
    }

    pub fn param_count(&mut self) -> usize {
        self.param_tensors().iter().map(|(_, p)| p.len()).sum()
    }

    fn check_symbol(&self, symbol: usize) -> Result<()> {
        if symbol >= self.vocab.len() {
            return Err(Error::IndexOutOfRange {
                index: symbol,
                len: self.vocab.len(),
                what: "symbol id".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub m: Array1<f64>,
    pub c: Array1<f64>,
}

/// Per-layer recurrent state (m_t, c_t).
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub layers: [LayerState; 2],
}

impl LstmState {
    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.m.iter().all(|v| v.is_finite()) && l.c.iter().all(|v| v.is_finite()))
    }
}

/// Post-nonlinearity gate values and the vectors the backward pass needs.
#[derive(Debug, Clone)]
pub struct GateActivations {
    /// [input; m_prev], the vector the gate matrix multiplied.
    pub concat: Array1<f64>,
    pub i: Array1<f64>,
    pub j: Array1<f64>,
    pub f: Array1<f64>,
    pub o: Array1<f64>,
    pub c_prev: Array1<f64>,
    pub c: Array1<f64>,
    pub tanh_c: Array1<f64>,
}

/// One LSTM cell update: pre-activations [i; j; f; o] = W·[u; m_prev] + b,
/// then c = σ(f)∘c_prev + σ(i)∘tanh(j) and m = σ(o)∘tanh(c).
pub fn cell_step(
    layer: &LstmLayer,
    u: &Array1<f64>,
    m_prev: &Array1<f64>,
    c_prev: &Array1<f64>,
) -> Result<(Array1<f64>, Array1<f64>, GateActivations)> {
    let n_h = layer.n_h();
    let mut concat = Array1::zeros(u.len() + m_prev.len());
    concat.slice_mut(ndarray::s![..u.len()]).assign(u);
    concat.slice_mut(ndarray::s![u.len()..]).assign(m_prev);
    let pre = affine(&layer.w, concat.view(), &layer.b)?;
    let i = pre.slice(ndarray::s![..n_h]).mapv(sigmoid);
    let j = pre.slice(ndarray::s![n_h..2 * n_h]).mapv(tanh);
    let f = pre.slice(ndarray::s![2 * n_h..3 * n_h]).mapv(sigmoid);
    let o = pre.slice(ndarray::s![3 * n_h..]).mapv(sigmoid);
    let c = &f * c_prev + &i * &j;
    let tanh_c = c.mapv(tanh);
    let m = &o * &tanh_c;
    if !m.iter().all(|v| v.is_finite()) || !c.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite cell state".into()));
    }
    let gates = GateActivations { concat, i, j, f, o, c_prev: c_prev.clone(), c: c.clone(), tanh_c };
    Ok((m, c, gates))
}

/// Backward through one cell. Accumulates into the layer's gradients and
/// returns (d_input, dm_prev, dc_prev).
fn cell_backward(
    layer: &mut LstmLayer,
    gates: &GateActivations,
    dm: &Array1<f64>,
    dc_carried: &Array1<f64>,
) -> Result<(Array1<f64>, Array1<f64>, Array1<f64>)> {
    let n_h = layer.n_h();
    let input_width = layer.input_width();
    // m = o ∘ tanh_c
    let do_post = dm * &gates.tanh_c;
    let dc = dc_carried + &(dm * &gates.o * &gates.tanh_c.mapv(tanh_grad));
    // c = f ∘ c_prev + i ∘ j
    let df_post = &dc * &gates.c_prev;
    let dc_prev = &dc * &gates.f;
    let di_post = &dc * &gates.j;
    let dj_post = &dc * &gates.i;
    let mut dpre = Array1::zeros(4 * n_h);
    dpre.slice_mut(ndarray::s![..n_h]).assign(&(&di_post * &gates.i.mapv(sigmoid_grad)));
    dpre.slice_mut(ndarray::s![n_h..2 * n_h]).assign(&(&dj_post * &gates.j.mapv(tanh_grad)));
    dpre.slice_mut(ndarray::s![2 * n_h..3 * n_h]).assign(&(&df_post * &gates.f.mapv(sigmoid_grad)));
    dpre.slice_mut(ndarray::s![3 * n_h..]).assign(&(&do_post * &gates.o.mapv(sigmoid_grad)));
    let dconcat = affine_backward(&mut layer.w, &mut layer.b, gates.concat.view(), dpre.view())?;
    let d_input = dconcat.slice(ndarray::s![..input_width]).to_owned();
    let dm_prev = dconcat.slice(ndarray::s![input_width..]).to_owned();
    Ok((d_input, dm_prev, dc_prev))
}

/// Everything one forward step caches for the backward pass.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub symbol: usize,
    pub embed_mask: Option<DropoutMask>,
    pub layer1: GateActivations,
    pub layer2: GateActivations,
    pub out_mask: Option<DropoutMask>,
    /// Layer-2 output after dropout, the vector projected to logits.
    pub v: Array1<f64>,
    pub probs: Array1<f64>,
}

fn forward_step(
    model: &ModelParams,
    symbol: usize,
    state: &LstmState,
    mut rng: Option<&mut RngStream>,
    training: bool,
) -> Result<(LstmState, StepTrace)> {
    model.check_symbol(symbol)?;
    if training && model.p_d > 0.0 && rng.is_none() {
        return Err(Error::InvalidConfig("training with dropout needs an rng".into()));
    }
    let embedded = model.w_embed.value.row(symbol).to_owned();
    let dummy = &mut RngStream::new(0);
    let (u, embed_mask) = dropout(
        embedded.view(),
        model.p_d,
        rng.as_deref_mut().unwrap_or(dummy),
        training,
    )?;
    let (m1, _c1, gates1) = cell_step(&model.layers[0], &u, &state.layers[0].m, &state.layers[0].c)?;
    let (m2, _c2, gates2) = cell_step(&model.layers[1], &m1, &state.layers[1].m, &state.layers[1].c)?;
    let (v, out_mask) = dropout(m2.view(), model.p_d, rng.as_deref_mut().unwrap_or(dummy), training)?;
    let logits = affine(&model.w_out, v.view(), &model.b_out)?;
    let probs = crate::nncore::softmax(logits.view());
    let new_state = LstmState {
        layers: [
            LayerState { m: m1, c: gates1.c.clone() },
            LayerState { m: m2, c: gates2.c.clone() },
        ],
    };
    Ok((new_state, StepTrace { symbol, embed_mask, layer1: gates1, layer2: gates2, out_mask, v, probs }))
}

/// Next-symbol distribution after consuming `symbol` from `state`.
/// With `training` false the step is deterministic and `rng` is unused.
pub fn model_step(
    model: &ModelParams,
    symbol: usize,
    state: &LstmState,
    rng: Option<&mut RngStream>,
    training: bool,
) -> Result<(Array1<f64>, LstmState)> {
    let (new_state, trace) = forward_step(model, symbol, state, rng, training)?;
    Ok((trace.probs, new_state))
}

/// A position in a left-to-right rollout: the state reached so far plus the
/// last symbol consumed, which is the next step's input. Sentences start
/// from the learned initial state with EOS as the first input, so the first
/// distribution is the model's sentence-initial one.
#[derive(Debug, Clone)]
pub struct Cursor {
    pub state: LstmState,
    pub last: usize,
}

impl Cursor {
    pub fn sentence_start(model: &ModelParams) -> Cursor {
        Cursor { state: model.initial_state(), last: model.vocab.eos() }
    }

    /// Distribution over the next symbol, plus the state that consuming
    /// `last` produced (the state a successor cursor should carry).
    pub fn next_dist(&self, model: &ModelParams) -> Result<(Array1<f64>, LstmState)> {
        model_step(model, self.last, &self.state, None, false)
    }

    /// Advance over `symbol`, returning its probability.
    pub fn consume(&mut self, model: &ModelParams, symbol: usize) -> Result<f64> {
        model.check_symbol(symbol)?;
        let (probs, state) = self.next_dist(model)?;
        self.state = state;
        self.last = symbol;
        Ok(probs[symbol])
    }
}

/// Initial states for every row of a block.
#[derive(Debug, Clone)]
pub struct BatchStates {
    pub rows: Vec<LstmState>,
}

/// Where a block's rows start: the learned initial state (gradients flow
/// into it) or states carried from the previous block (detached, no
/// gradient).
pub enum BlockInit<'a> {
    LearnedInit,
    Carried(&'a BatchStates),
}

/// Loss and carry-over from one block.
#[derive(Debug)]
pub struct SequenceLoss {
    /// Mean of −ln P(target) over all cells.
    pub mean_nll: f64,
    /// Per-cell −ln P(target), same shape as the block.
    pub cell_nll: Array2<f64>,
    /// Detached states after the block's last step, one per row.
    pub final_states: BatchStates,
}

/// Forward and full within-block BPTT over one block. Gradients of the
/// mean cell loss accumulate into the model; carried-in states receive
/// none. Dropout masks are drawn row-major over (row, step), input mask
/// before output mask, so the draw order is reproducible.
pub fn sequence_nll(
    model: &mut ModelParams,
    block: &Block,
    init: BlockInit<'_>,
    mut rng: Option<&mut RngStream>,
    training: bool,
) -> Result<SequenceLoss> {
    let batch = block.batch_size();
    let steps = block.block_len();
    if let BlockInit::Carried(states) = &init {
        if states.rows.len() != batch {
            return Err(Error::InvalidInput(format!(
                "carried states cover {} rows, block has {batch}",
                states.rows.len()
            )));
        }
    }
    let cells = (batch * steps) as f64;
    let scale = 1.0 / cells;
    let mut cell_nll = Array2::zeros((batch, steps));
    let mut final_states = Vec::with_capacity(batch);

    for r in 0..batch {
        let start = match &init {
            BlockInit::LearnedInit => model.initial_state(),
            BlockInit::Carried(states) => states.rows[r].clone(),
        };
        // forward, keeping per-step traces
        let mut state = start;
        let mut traces: Vec<StepTrace> = Vec::with_capacity(steps);
        let mut losses = Vec::with_capacity(steps);
        for t in 0..steps {
            let symbol = block.input[(r, t)];
            let target = block.target[(r, t)];
            model.check_symbol(target)?;
            let (next, trace) = forward_step(model, symbol, &state, rng.as_deref_mut(), training)?;
            let logit_like = trace.probs[target].max(f64::MIN_POSITIVE);
            let nll = -logit_like.ln();
            if !nll.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss in block {}", block.index)));
            }
            cell_nll[(r, t)] = nll;
            losses.push(target);
            traces.push(trace);
            state = next;
        }
        final_states.push(state);

        // backward in reverse step order
        let mut dm1 = Array1::zeros(model.n_h);
        let mut dc1 = Array1::zeros(model.n_h);
        let mut dm2 = Array1::zeros(model.n_h);
        let mut dc2 = Array1::zeros(model.n_h);
        for t in (0..steps).rev() {
            let trace = &traces[t];
            let target = losses[t];
            let dlogits = softmax_xent_backward(&trace.probs, target, scale);
            let dv = affine_backward(&mut model.w_out, &mut model.b_out, trace.v.view(), dlogits.view())?;
            let dm2_total = dm2 + dropout_backward(dv.view(), trace.out_mask.as_ref());
            let [l1, l2] = &mut model.layers;
            let (dm1_from_l2, dm2_prev, dc2_prev) = cell_backward(l2, &trace.layer2, &dm2_total, &dc2)?;
            let dm1_total = dm1 + dm1_from_l2;
            let (du, dm1_prev, dc1_prev) = cell_backward(l1, &trace.layer1, &dm1_total, &dc1)?;
            let de = dropout_backward(du.view(), trace.embed_mask.as_ref());
            model
                .w_embed
                .grad
                .index_axis_mut(Axis(0), trace.symbol)
                .scaled_add(1.0, &de);
            dm1 = dm1_prev;
            dc1 = dc1_prev;
            dm2 = dm2_prev;
            dc2 = dc2_prev;
        }
        if matches!(init, BlockInit::LearnedInit) {
            let [l1, l2] = &mut model.layers;
            l1.init_m.grad.scaled_add(1.0, &dm1);
            l1.init_c.grad.scaled_add(1.0, &dc1);
            l2.init_m.grad.scaled_add(1.0, &dm2);
            l2.init_c.grad.scaled_add(1.0, &dc2);
        }
    }

    let mean_nll = cell_nll.sum() / cells;
    if !mean_nll.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss in block {}", block.index)));
    }
    Ok(SequenceLoss { mean_nll, cell_nll, final_states: BatchStates { rows: final_states } })
}

/// Forward-only mean loss over a block, no gradients, no dropout. Used by
/// the finite-difference gradient checker as the probed objective.
pub fn block_loss(model: &ModelParams, block: &Block, init: BlockInit<'_>) -> Result<f64> {
    let batch = block.batch_size();
    let steps = block.block_len();
    let mut total = 0.0;
    for r in 0..batch {
        let mut state = match &init {
            BlockInit::LearnedInit => model.initial_state(),
            BlockInit::Carried(states) => states.rows[r].clone(),
        };
        for t in 0..steps {
            let (probs, next) = model_step(model, block.input[(r, t)], &state, None, false)?;
            let target = block.target[(r, t)];
            model.check_symbol(target)?;
            total -= probs[target].max(f64::MIN_POSITIVE).ln();
            state = next;
        }
    }
    Ok(total / (batch * steps) as f64)
}

const MODEL_MAGIC: &str = "salm-model v1";
const ARRAY_COUNT: usize = 11;

fn push_f64_slice(buf: &mut Vec<u8>, values: &[f64]) {
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize a model: text header (format version, level, mode, sizes,
/// dropout, vocabulary in id order), 11 length-prefixed row-major
/// little-endian f64 arrays, and a trailing SHA-256 of everything before
/// it. The write is temp-file-then-rename, so a crash never leaves a
/// partial file at `path`.
pub fn save_model(model: &ModelParams, path: &Path) -> Result<()> {
    let mut m = model.clone();
    for (name, p) in m.param_tensors() {
        if !p.value().iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("cannot save non-finite parameter {name}")));
        }
    }

    let mut header = String::new();
    let _ = writeln!(header, "{MODEL_MAGIC}");
    let _ = writeln!(header, "level {}", model.vocab.level());
    let _ = writeln!(header, "mode {}", model.mode);
    let _ = writeln!(header, "n_h {}", model.n_h);
    let _ = writeln!(header, "n_e {}", model.n_e);
    let _ = writeln!(header, "p_d {}", model.p_d);
    let _ = writeln!(header, "vocab {}", model.vocab.len());
    for entry in model.vocab.entries() {
        let kind = match entry.kind {
            SymbolKind::Lexical => "lexical",
            SymbolKind::Tag => "tag",
            SymbolKind::Unk => "unk",
            SymbolKind::Eos => "eos",
            SymbolKind::Sep => "sep",
        };
        let _ = writeln!(header, "{kind} {}", serde_json::to_string(&entry.text).expect("string serializes"));
    }
    let _ = writeln!(header, "arrays {ARRAY_COUNT}");

    let mut buf = header.into_bytes();
    for (_, p) in m.param_tensors() {
        push_f64_slice(&mut buf, p.value());
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    let tmp = path.with_extension("tmp-write");
    fs::write(&tmp, &buf).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::ModelFormat("unterminated header line".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::ModelFormat("header is not UTF-8".into()))
    }

    fn keyed_line(&mut self, key: &str) -> Result<&'a str> {
        let line = self.line()?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| Error::ModelFormat(format!("expected \"{key} ...\", got {line:?}")))
    }

    fn f64_array(&mut self) -> Result<Vec<f64>> {
        let need = |n: usize, have: usize| -> Error {
            Error::ModelFormat(format!("array data ends early (need {n} bytes, {have} left)"))
        };
        let rest = &self.bytes[self.pos..];
        if rest.len() < 8 {
            return Err(need(8, rest.len()));
        }
        let count = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        let body = &rest[8..];
        if body.len() < count * 8 {
            return Err(need(count * 8, body.len()));
        }
        self.pos += 8 + count * 8;
        Ok(body[..count * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn shaped1(name: &str, data: Vec<f64>, len: usize) -> Result<Array1<f64>> {
    if data.len() != len {
        return Err(Error::ShapeMismatch(format!("{name}: expected {len} elements, found {}", data.len())));
    }
    Ok(Array1::from_vec(data))
}

fn shaped2(name: &str, data: Vec<f64>, rows: usize, cols: usize) -> Result<Array2<f64>> {
    if data.len() != rows * cols {
        return Err(Error::ShapeMismatch(format!(
            "{name}: expected {rows}x{cols} = {} elements, found {}",
            rows * cols,
            data.len()
        )));
    }
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::ShapeMismatch(e.to_string()))
}

/// Load a model saved by [`save_model`]. The trailing checksum is verified
/// before anything is parsed, so truncation or corruption is reported as a
/// checksum failure, never as a partially loaded model.
pub fn load_model(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 32 {
        return Err(Error::ChecksumMismatch(format!("file is {} bytes, shorter than its checksum", bytes.len())));
    }
    let (body, claimed) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != claimed {
        return Err(Error::ChecksumMismatch("stored checksum does not match file contents".into()));
    }

    let mut cur = ByteCursor { bytes: body, pos: 0 };
    let magic = cur.line()?;
    if magic != MODEL_MAGIC {
        return Err(Error::VersionMismatch { found: magic.to_string() });
    }
    let level: Level = cur.keyed_line("level")?.parse().map_err(|_| Error::ModelFormat("bad level".into()))?;
    let mode: Mode = cur.keyed_line("mode")?.parse().map_err(|_| Error::ModelFormat("bad mode".into()))?;
    let n_h: usize = cur.keyed_line("n_h")?.parse().map_err(|_| Error::ModelFormat("bad n_h".into()))?;
    let n_e: usize = cur.keyed_line("n_e")?.parse().map_err(|_| Error::ModelFormat("bad n_e".into()))?;
    let p_d: f64 = cur.keyed_line("p_d")?.parse().map_err(|_| Error::ModelFormat("bad p_d".into()))?;
    let vocab_len: usize = cur.keyed_line("vocab")?.parse().map_err(|_| Error::ModelFormat("bad vocab count".into()))?;
    let mut entries = Vec::with_capacity(vocab_len);
    for _ in 0..vocab_len {
        let line = cur.line()?;
        let (kind_text, quoted) = line
            .split_once(' ')
            .ok_or_else(|| Error::ModelFormat(format!("bad vocabulary line {line:?}")))?;
        let kind = match kind_text {
            "lexical" => SymbolKind::Lexical,
            "tag" => SymbolKind::Tag,
            "unk" => SymbolKind::Unk,
            "eos" => SymbolKind::Eos,
            "sep" => SymbolKind::Sep,
            other => return Err(Error::ModelFormat(format!("unknown symbol kind {other:?}"))),
        };
        let text: String =
            serde_json::from_str(quoted).map_err(|e| Error::ModelFormat(format!("bad symbol text: {e}")))?;
        entries.push(SymbolEntry { text, kind });
    }
    let arrays: usize = cur.keyed_line("arrays")?.parse().map_err(|_| Error::ModelFormat("bad array count".into()))?;
    if arrays != ARRAY_COUNT {
        return Err(Error::ModelFormat(format!("expected {ARRAY_COUNT} arrays, header says {arrays}")));
    }

    let vocab = Vocabulary::from_entries(level, entries)?;
    if mode == Mode::Salm && vocab.tag_ids().is_empty() {
        return Err(Error::ModelFormat("salm model without tag symbols".into()));
    }
    if n_h == 0 || n_e == 0 {
        return Err(Error::ModelFormat("n_h and n_e must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&p_d) {
        return Err(Error::ModelFormat(format!("dropout probability {p_d} outside [0, 1)")));
    }
    let v = vocab.len();

    let w_embed = shaped2("w_embed", cur.f64_array()?, v, n_e)?;
    let mut layers = Vec::with_capacity(2);
    for (ln, input_width) in [("layer1", n_e), ("layer2", n_h)] {
        let w = shaped2(&format!("{ln}.w"), cur.f64_array()?, 4 * n_h, input_width + n_h)?;
        let b = shaped1(&format!("{ln}.b"), cur.f64_array()?, 4 * n_h)?;
        let init_m = shaped1(&format!("{ln}.init_m"), cur.f64_array()?, n_h)?;
        let init_c = shaped1(&format!("{ln}.init_c"), cur.f64_array()?, n_h)?;
        layers.push(LstmLayer {
            w: Parameter { grad: Array2::zeros(w.dim()), value: w },
            b: Parameter { grad: Array1::zeros(b.len()), value: b },
            init_m: Parameter { grad: Array1::zeros(init_m.len()), value: init_m },
            init_c: Parameter { grad: Array1::zeros(init_c.len()), value: init_c },
        });
    }
    let w_out = shaped2("w_out", cur.f64_array()?, v, n_h)?;
    let b_out = shaped1("b_out", cur.f64_array()?, v)?;
    if cur.pos != body.len() {
        return Err(Error::ModelFormat(format!("{} unexpected trailing bytes", body.len() - cur.pos)));
    }
    let layer2 = layers.pop().expect("two layers");
    let layer1 = layers.pop().expect("two layers");
    Ok(ModelParams {
        vocab,
        mode,
        n_h,
        n_e,
        p_d,
        w_embed: Parameter { grad: Array2::zeros(w_embed.dim()), value: w_embed },
        layers: [layer1, layer2],
        w_out: Parameter { grad: Array2::zeros(w_out.dim()), value: w_out },
        b_out: Parameter { grad: Array1::zeros(b_out.len()), value: b_out },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_conll_2col, Vocabulary};

    pub(crate) fn tiny_vocab() -> Vocabulary {
        let corpus = parse_conll_2col("ab\tT\nba\tU\n\n").unwrap();
        Vocabulary::build(&corpus, Level::Char, 100).unwrap()
    }

    pub(crate) fn tiny_model(seed: u64) -> ModelParams {
        let mut rng = RngStream::new(seed);
        ModelParams::new(tiny_vocab(), Mode::Salm, 3, 3, 0.0, &mut rng).unwrap()
    }

    fn zeroed(mut model: ModelParams) -> ModelParams {
        for (_, p) in model.param_tensors() {
            for v in p.value_mut() {
                *v = 0.0;
            }
        }
        model
    }

    #[test]
    fn zero_weight_cell_halves_memory() {
        let model = zeroed(tiny_model(1));
        let u = Array1::zeros(3);
        let c_prev = Array1::from_vec(vec![0.4, -1.0, 2.0]);
        let m_prev = Array1::zeros(3);
        let (m, c, _) = cell_step(&model.layers[0], &u, &m_prev, &c_prev).unwrap();
        for k in 0..3 {
            assert!((c[k] - 0.5 * c_prev[k]).abs() < 1e-15);
            assert!((m[k] - 0.5 * (0.5 * c_prev[k]).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_state_is_a_fixed_point_of_zero_weights() {
        let model = zeroed(tiny_model(1));
        let z = Array1::zeros(3);
        let (m, c, _) = cell_step(&model.layers[0], &z, &z, &z).unwrap();
        assert!(m.iter().all(|&v| v == 0.0));
        assert!(c.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_gates_preserve_memory() {
        let mut model = zeroed(tiny_model(1));
        {
            let b = &mut model.layers[0].b.value;
            for k in 0..3 {
                b[k] = -40.0; // input gate shut
                b[6 + k] = 40.0; // forget gate open
            }
        }
        let u = Array1::zeros(3);
        let m_prev = Array1::zeros(3);
        let c_prev = Array1::from_vec(vec![1.5, -0.25, 0.0]);
        let (_, c, _) = cell_step(&model.layers[0], &u, &m_prev, &c_prev).unwrap();
        for k in 0..3 {
            assert!((c[k] - c_prev[k]).abs() < 1e-10, "memory leaked at {k}");
        }
    }

    #[test]
    fn zero_weight_model_is_uniform() {
        let model = zeroed(tiny_model(2));
        let v = model.vocab_size() as f64;
        let (probs, _) = model_step(&model, 0, &model.initial_state(), None, false).unwrap();
        for &p in probs.iter() {
            assert!((p - 1.0 / v).abs() < 1e-15);
        }
    }

    #[test]
    fn inference_step_is_deterministic() {
        let model = tiny_model(3);
        let state = model.initial_state();
        let (p1, s1) = model_step(&model, 2, &state, None, false).unwrap();
        let (p2, s2) = model_step(&model, 2, &state, None, false).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn step_distributions_normalize_across_random_models() {
        for seed in 0..20 {
            let model = tiny_model(seed);
            let mut state = model.initial_state();
            for symbol in [0usize, 3, 1, 5] {
                let (probs, next) = model_step(&model, symbol, &state, None, false).unwrap();
                let sum: f64 = probs.sum();
                assert!((sum - 1.0).abs() < 1e-6, "seed {seed}: sum {sum}");
                assert!(probs.iter().all(|&p| p > 0.0));
                state = next;
            }
        }
    }

    #[test]
    fn invalid_symbol_is_an_index_error() {
        let model = tiny_model(4);
        let err = model_step(&model, 999, &model.initial_state(), None, false).unwrap_err();
        assert!(matches!(err, Error::IndexOutOfRange { index: 999, .. }));
    }

    fn block_of(ids: &[usize], batch: usize, len: usize) -> Block {
        let seqs = [crate::corpus::SymbolSequence {
            ids: ids.to_vec(),
            mode: Mode::Baseline,
            level: Level::Char,
            word_spans: vec![],
        }];
        crate::corpus::make_blocks(&seqs, batch, len).unwrap().blocks.remove(0)
    }

    #[test]
    fn zero_weight_block_loss_is_log_vocab() {
        let mut model = zeroed(tiny_model(5));
        let v = model.vocab_size();
        let ids: Vec<usize> = (0..30).map(|k| k % v).collect();
        let block = block_of(&ids, 2, 6);
        let loss = sequence_nll(&mut model, &block, BlockInit::LearnedInit, None, false).unwrap();
        assert!((loss.mean_nll - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn streaming_equals_block_evaluation() {
        let model = tiny_model(6);
        let v = model.vocab_size();
        let ids: Vec<usize> = (0..40).map(|k| (k * 5 + 1) % v).collect();
        let block = block_of(&ids, 1, 30);
        let mut probe = model.clone();
        let loss = sequence_nll(&mut probe, &block, BlockInit::LearnedInit, None, false).unwrap();
        let mut state = model.initial_state();
        for t in 0..30 {
            let (probs, next) = model_step(&model, ids[t], &state, None, false).unwrap();
            let direct = -probs[ids[t + 1]].ln();
            assert!(
                (direct - loss.cell_nll[(0, t)]).abs() < 1e-10,
                "step {t}: streaming {direct} vs block {}",
                loss.cell_nll[(0, t)]
            );
            state = next;
        }
    }

    #[test]
    fn learned_init_gets_gradient_carried_states_do_not() {
        let mut model = tiny_model(7);
        let v = model.vocab_size();
        let ids: Vec<usize> = (0..26).map(|k| k % v).collect();
        let block = block_of(&ids, 2, 4);
        sequence_nll(&mut model, &block, BlockInit::LearnedInit, None, false).unwrap();
        let init_grad: f64 = model.layers[0].init_m.grad.iter().map(|g| g.abs()).sum();
        assert!(init_grad > 0.0, "learned initial state never received gradient");
        model.zero_grads();
        let carried = BatchStates { rows: vec![model.initial_state(), model.initial_state()] };
        sequence_nll(&mut model, &block, BlockInit::Carried(&carried), None, false).unwrap();
        for layer in &model.layers {
            assert!(layer.init_m.grad.iter().all(|&g| g == 0.0));
            assert!(layer.init_c.grad.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn states_stay_finite_over_long_random_walks() {
        let model = tiny_model(8);
        let v = model.vocab_size();
        let mut rng = RngStream::new(99);
        let mut state = model.initial_state();
        for _ in 0..10_000 {
            let symbol = (rng.next_u64() as usize) % v;
            let (_, next) = model_step(&model, symbol, &state, None, false).unwrap();
            state = next;
        }
        assert!(state.is_finite());
    }

    #[test]
    fn save_load_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model(9);
        let p1 = dir.path().join("a.salm");
        let p2 = dir.path().join("b.salm");
        save_model(&model, &p1).unwrap();
        let loaded = load_model(&p1).unwrap();
        save_model(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(loaded.vocab.entries(), model.vocab.entries());
        assert_eq!(loaded.w_embed.value, model.w_embed.value);
        assert_eq!(loaded.mode, model.mode);
        assert_eq!(loaded.p_d, model.p_d);
    }

    #[test]
    fn truncated_file_fails_the_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model(10);
        let path = dir.path().join("m.salm");
        save_model(&model, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 40]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::ChecksumMismatch(_))));
    }

    #[test]
    fn corrupted_byte_fails_the_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model(11);
        let path = dir.path().join("m.salm");
        save_model(&model, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_model(&path), Err(Error::ChecksumMismatch(_))));
    }

    fn rewrite_with_fresh_checksum(path: &Path, edit: impl FnOnce(&mut Vec<u8>)) {
        let bytes = fs::read(path).unwrap();
        let mut body = bytes[..bytes.len() - 32].to_vec();
        edit(&mut body);
        let digest = Sha256::digest(&body);
        body.extend_from_slice(&digest);
        fs::write(path, &body).unwrap();
    }

    #[test]
    fn header_array_disagreement_is_a_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model(12);
        let path = dir.path().join("m.salm");
        save_model(&model, &path).unwrap();
        rewrite_with_fresh_checksum(&path, |body| {
            let text = String::from_utf8(body.clone()).unwrap_or_default();
            let _ = text;
            let needle = b"n_h 3\n";
            let pos = body.windows(needle.len()).position(|w| w == needle).unwrap();
            body[pos + 4] = b'7';
        });
        assert!(matches!(load_model(&path), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn unknown_version_line_is_a_version_error() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model(13);
        let path = dir.path().join("m.salm");
        save_model(&model, &path).unwrap();
        rewrite_with_fresh_checksum(&path, |body| {
            body[MODEL_MAGIC.len() - 1] = b'9';
        });
        match load_model(&path).unwrap_err() {
            Error::VersionMismatch { found } => assert!(found.ends_with("v9")),
            other => panic!("expected version mismatch, got {other:?}"),
        }
    }

    #[test]
    fn dropout_training_draws_are_reproducible() {
        let model = {
            let mut rng = RngStream::new(21);
            ModelParams::new(tiny_vocab(), Mode::Salm, 3, 3, 0.5, &mut rng).unwrap()
        };
        let v = model.vocab_size();
        let ids: Vec<usize> = (0..26).map(|k| k % v).collect();
        let block = block_of(&ids, 2, 4);
        let run = |seed: u64| {
            let mut m = model.clone();
            let mut rng = RngStream::substream(seed, 1, 0);
            sequence_nll(&mut m, &block, BlockInit::LearnedInit, Some(&mut rng), true)
                .unwrap()
                .mean_nll
        };
        assert_eq!(run(5).to_bits(), run(5).to_bits());
        assert_ne!(run(5).to_bits(), run(6).to_bits());
    }
}
