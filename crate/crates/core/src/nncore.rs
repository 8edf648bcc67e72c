//! Differentiable numeric primitives for the LSTM stack.
//!
//! Everything runs at 64-bit precision. Each primitive has an explicit
//! forward and backward; the backward contracts are what the finite
//! difference checks in `oracle` verify.

use ndarray::{Array, Array1, ArrayView1, Dimension};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};

/// Deterministic random stream: same seed and draw order give bitwise
/// identical outputs across runs and platforms.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    draws: u64,
    rng: ChaCha8Rng,
}

/// splitmix64 finalizer, used to derive substream seeds.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        RngStream { seed, draws: 0, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Derive an independent stream from (seed, stage, index). Used to keep
    /// per-particle draws identical regardless of evaluation order.
    pub fn substream(seed: u64, stage: u64, index: u64) -> Self {
        let derived = mix64(seed ^ mix64(stage ^ mix64(index)));
        RngStream { seed: derived, draws: 0, rng: ChaCha8Rng::seed_from_u64(derived) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn next_u64(&mut self) -> u64 {
        self.draws += 1;
        self.rng.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of entropy.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [-scale, scale).
    pub fn next_symmetric(&mut self, scale: f64) -> f64 {
        (self.next_f64() * 2.0 - 1.0) * scale
    }
}

/// A learned tensor paired with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter<D: Dimension> {
    pub value: Array<f64, D>,
    pub grad: Array<f64, D>,
}

impl<D: Dimension> Parameter<D> {
    pub fn zeros<Sh: ndarray::ShapeBuilder<Dim = D> + Clone>(shape: Sh) -> Self {
        Parameter { value: Array::zeros(shape.clone()), grad: Array::zeros(shape) }
    }

    /// Uniform init on [-scale, scale), drawn in row-major order.
    pub fn uniform<Sh: ndarray::ShapeBuilder<Dim = D> + Clone>(
        shape: Sh,
        scale: f64,
        rng: &mut RngStream,
    ) -> Self {
        let mut p = Self::zeros(shape);
        for v in p.value.iter_mut() {
            *v = rng.next_symmetric(scale);
        }
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Uniform flat view over parameters of any rank, used by the optimizer and
/// the finite difference checker.
pub trait ParamTensor {
    fn len(&self) -> usize;
    fn value(&self) -> &[f64];
    fn value_mut(&mut self) -> &mut [f64];
    fn grad(&self) -> &[f64];
    fn grad_mut(&mut self) -> &mut [f64];
}

impl<D: Dimension> ParamTensor for Parameter<D> {
    fn len(&self) -> usize {
        self.value.len()
    }
    fn value(&self) -> &[f64] {
        self.value.as_slice().expect("parameter arrays are standard layout")
    }
    fn value_mut(&mut self) -> &mut [f64] {
        self.value.as_slice_mut().expect("parameter arrays are standard layout")
    }
    fn grad(&self) -> &[f64] {
        self.grad.as_slice().expect("parameter arrays are standard layout")
    }
    fn grad_mut(&mut self) -> &mut [f64] {
        self.grad.as_slice_mut().expect("parameter arrays are standard layout")
    }
}

/// y = W x + b.
pub fn affine(w: &Parameter<ndarray::Ix2>, x: ArrayView1<f64>, b: &Parameter<ndarray::Ix1>) -> Result<Array1<f64>> {
    let (rows, cols) = w.value.dim();
    if cols != x.len() || rows != b.value.len() {
        return Err(Error::Dimension {
            expected: format!("W {rows}x{cols} with x len {cols}, b len {rows}"),
            found: format!("x len {}, b len {}", x.len(), b.value.len()),
            op: "affine".into(),
        });
    }
    let mut y = w.value.dot(&x);
    y += &b.value;
    Ok(y)
}

/// Backward of `affine`: accumulates dW += dy xᵀ, db += dy, returns dx = Wᵀ dy.
pub fn affine_backward(
    w: &mut Parameter<ndarray::Ix2>,
    b: &mut Parameter<ndarray::Ix1>,
    x: ArrayView1<f64>,
    dy: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    let (rows, cols) = w.value.dim();
    if cols != x.len() || rows != dy.len() {
        return Err(Error::Dimension {
            expected: format!("W {rows}x{cols} with x len {cols}, dy len {rows}"),
            found: format!("x len {}, dy len {}", x.len(), dy.len()),
            op: "affine_backward".into(),
        });
    }
    // dW += dy ⊗ x, row by row to avoid temporaries.
    for (r, &dyr) in dy.iter().enumerate() {
        if dyr != 0.0 {
            let mut row = w.grad.row_mut(r);
            row.scaled_add(dyr, &x);
        }
        b.grad[r] += dyr;
    }
    Ok(w.value.t().dot(&dy))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative given y = sigmoid(x).
pub fn sigmoid_grad(y: f64) -> f64 {
    y * (1.0 - y)
}

pub fn tanh(x: f64) -> f64 {
    x.tanh()
}

/// Derivative given y = tanh(x).
pub fn tanh_grad(y: f64) -> f64 {
    1.0 - y * y
}

/// Softmax of `logits` with the cross-entropy loss (in nats) of `target`.
///
/// Max-subtracted for stability; the probabilities sum to 1 within 1e-6 and
/// are strictly positive for finite logits.
pub fn softmax_xent(logits: ArrayView1<f64>, target: usize) -> Result<(f64, Array1<f64>)> {
    if target >= logits.len() {
        return Err(Error::IndexOutOfRange { index: target, len: logits.len(), what: "target symbol".into() });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs = Array1::zeros(logits.len());
    let mut sum = 0.0;
    for (p, &l) in probs.iter_mut().zip(logits.iter()) {
        let e = (l - max).exp();
        *p = e;
        sum += e;
    }
    probs.mapv_inplace(|e| e / sum);
    let loss = sum.ln() - (logits[target] - max);
    Ok((loss, probs))
}

/// Softmax alone (no target), same stabilization.
pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs = logits.mapv(|l| (l - max).exp());
    let sum = probs.sum();
    probs.mapv_inplace(|e| e / sum);
    probs
}

/// Backward of `softmax_xent`: dlogits = probs - onehot(target), scaled.
pub fn softmax_xent_backward(probs: &Array1<f64>, target: usize, scale: f64) -> Array1<f64> {
    let mut d = probs.mapv(|p| p * scale);
    d[target] -= scale;
    d
}

/// Per-unit keep/drop mask; kept units carry the 1/(1-p) scale (inverted
/// dropout, so evaluation is an identity).
#[derive(Debug, Clone)]
pub struct DropoutMask {
    pub factors: Array1<f64>,
}

/// Apply dropout to `x`. In evaluation mode (or at p = 0) this is the
/// identity and draws nothing from `rng`.
pub fn dropout(
    x: ArrayView1<f64>,
    p: f64,
    rng: &mut RngStream,
    training: bool,
) -> Result<(Array1<f64>, Option<DropoutMask>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidConfig(format!("dropout probability must be in [0, 1), got {p}")));
    }
    if !training || p == 0.0 {
        return Ok((x.to_owned(), None));
    }
    let scale = 1.0 / (1.0 - p);
    let mut factors = Array1::zeros(x.len());
    for f in factors.iter_mut() {
        *f = if rng.next_f64() < p { 0.0 } else { scale };
    }
    let y = &x * &factors;
    Ok((y, Some(DropoutMask { factors })))
}

/// Backward of `dropout`: re-applies the saved mask.
pub fn dropout_backward(dy: ArrayView1<f64>, mask: Option<&DropoutMask>) -> Array1<f64> {
    match mask {
        None => dy.to_owned(),
        Some(m) => &dy * &m.factors,
    }
}

/// One SGD step over a named parameter list: optional global-norm clipping,
/// then value -= lr * grad, then grads zeroed.
pub fn sgd_step(
    params: &mut [(&'static str, &mut dyn ParamTensor)],
    lr: f64,
    clip_norm: Option<f64>,
) -> Result<()> {
    let mut norm_sq = 0.0;
    for (name, p) in params.iter() {
        for &g in p.grad() {
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in parameter {name}")));
            }
            norm_sq += g * g;
        }
    }
    let mut scale = 1.0;
    if let Some(clip) = clip_norm {
        let norm = norm_sq.sqrt();
        if norm > clip {
            scale = clip / norm;
        }
    }
    for (_, p) in params.iter_mut() {
        let step = lr * scale;
        let n = p.len();
        for i in 0..n {
            let g = p.grad()[i];
            p.value_mut()[i] -= step * g;
        }
        p.grad_mut().fill(0.0);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use ndarray::array;

    fn fd_slope(f: impl Fn(f64) -> f64, x: f64, eps: f64) -> f64 {
        (f(x + eps) - f(x - eps)) / (2.0 * eps)
    }

    #[test]
    fn affine_identity_and_constant() {
        let w = Parameter { value: Array2::eye(2), grad: Array2::zeros((2, 2)) };
        let b = Parameter::<ndarray::Ix1>::zeros(2);
        let y = affine(&w, array![3.0, -1.0].view(), &b).unwrap();
        assert_eq!(y, array![3.0, -1.0]);

        let w0 = Parameter::<ndarray::Ix2>::zeros((2, 2));
        let b = Parameter { value: array![1.0, 2.0], grad: Array1::zeros(2) };
        let y = affine(&w0, array![9.0, 9.0].view(), &b).unwrap();
        assert_eq!(y, array![1.0, 2.0]);
    }

    #[test]
    fn affine_shape_mismatch_names_shapes() {
        let w = Parameter::<ndarray::Ix2>::zeros((2, 3));
        let b = Parameter::<ndarray::Ix1>::zeros(2);
        let err = affine(&w, array![1.0].view(), &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("len 1"), "{msg}");
    }

    #[test]
    fn affine_backward_scalar_chain_rule() {
        let mut w = Parameter { value: array![[2.0]], grad: array![[0.0]] };
        let mut b = Parameter::<ndarray::Ix1>::zeros(1);
        let dx = affine_backward(&mut w, &mut b, array![5.0].view(), array![1.0].view()).unwrap();
        assert_eq!(w.grad, array![[5.0]]);
        assert_eq!(b.grad, array![1.0]);
        assert_eq!(dx, array![2.0]);
    }

    #[test]
    fn sigmoid_tanh_values_and_saturation() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(tanh(0.0), 0.0);
        assert!((sigmoid(40.0) - 1.0).abs() < f64::EPSILON);
        assert!(sigmoid(-1000.0).is_finite() && sigmoid(1000.0).is_finite());
        assert_eq!(sigmoid_grad(sigmoid(0.0)), 0.25);
    }

    #[test]
    fn sigmoid_tanh_backward_match_finite_differences() {
        for &x in &[-2.0, -0.3, 0.0, 0.7, 3.0] {
            let a = sigmoid_grad(sigmoid(x));
            let n = fd_slope(sigmoid, x, 1e-5);
            assert!((a - n).abs() < 1e-8, "sigmoid' at {x}: {a} vs {n}");
            let a = tanh_grad(tanh(x));
            let n = fd_slope(tanh, x, 1e-5);
            assert!((a - n).abs() < 1e-8, "tanh' at {x}: {a} vs {n}");
        }
    }

    #[test]
    fn softmax_xent_uniform_and_stability() {
        let (loss, probs) = softmax_xent(array![0.0, 0.0].view(), 0).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        assert!((probs[0] - 0.5).abs() < 1e-12);

        let (_, probs) = softmax_xent(array![1000.0, 0.0].view(), 0).unwrap();
        assert!(probs[0] > 1.0 - 1e-12 && probs.iter().all(|p| p.is_finite()));

        let err = softmax_xent(array![0.0, 0.0].view(), 2).unwrap_err();
        assert!(matches!(err, Error::IndexOutOfRange { .. }));
    }

    #[test]
    fn softmax_xent_backward_uniform_two_way() {
        let (_, probs) = softmax_xent(array![0.0, 0.0].view(), 0).unwrap();
        let d = softmax_xent_backward(&probs, 0, 1.0);
        assert!((d[0] + 0.5).abs() < 1e-12 && (d[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_xent_backward_matches_finite_differences() {
        let logits = array![0.3, -1.2, 2.0, 0.0];
        let target = 2;
        let (_, probs) = softmax_xent(logits.view(), target).unwrap();
        let analytic = softmax_xent_backward(&probs, target, 1.0);
        for i in 0..logits.len() {
            let numeric = fd_slope(
                |v| {
                    let mut l = logits.clone();
                    l[i] = v;
                    softmax_xent(l.view(), target).unwrap().0
                },
                logits[i],
                1e-5,
            );
            assert!((analytic[i] - numeric).abs() < 1e-8, "dlogit[{i}]");
        }
    }

    #[test]
    fn dropout_identity_cases() {
        let x = array![1.0, -2.0, 3.0];
        let mut rng = RngStream::new(7);
        let (y, mask) = dropout(x.view(), 0.0, &mut rng, true).unwrap();
        assert_eq!(y, x);
        assert!(mask.is_none());
        let (y, mask) = dropout(x.view(), 0.2, &mut rng, false).unwrap();
        assert_eq!(y, x);
        assert!(mask.is_none());
        assert!(matches!(
            dropout(x.view(), 1.0, &mut rng, true),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn dropout_keep_rate_matches_binomial_oracle() {
        // 1e5 units at p = 0.2: keep fraction within ~5 sigma of 0.8.
        let x = Array1::ones(100_000);
        let mut rng = RngStream::new(123);
        let (y, _) = dropout(x.view(), 0.2, &mut rng, true).unwrap();
        let kept = y.iter().filter(|&&v| v != 0.0).count() as f64 / 1e5;
        assert!((0.79..=0.81).contains(&kept), "keep rate {kept}");
        // survivors carry the inverted scale
        let scale = 1.0 / 0.8;
        assert!(y.iter().all(|&v| v == 0.0 || (v - scale).abs() < 1e-15));
    }

    #[test]
    fn dropout_mask_reproducible_from_seed() {
        let x = Array1::ones(64);
        let (a, _) = dropout(x.view(), 0.3, &mut RngStream::new(99), true).unwrap();
        let (b, _) = dropout(x.view(), 0.3, &mut RngStream::new(99), true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rng_stream_is_deterministic_and_counts_draws() {
        let mut a = RngStream::new(5);
        let mut b = RngStream::new(5);
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
        assert_eq!(a.draws(), 8);
        let mut s1 = RngStream::substream(5, 1, 0);
        let mut s2 = RngStream::substream(5, 1, 1);
        assert_ne!(s1.next_u64(), s2.next_u64());
    }

    #[test]
    fn sgd_step_arithmetic_clipping_and_fixed_point() {
        let mut w = Parameter { value: array![1.0], grad: array![0.5] };
        sgd_step(&mut [("w", &mut w)], 1.0, None).unwrap();
        assert_eq!(w.value, array![0.5]);
        assert_eq!(w.grad, array![0.0]);

        // global norm 10 clipped to 5 halves the effective step
        let mut a = Parameter { value: array![0.0], grad: array![6.0] };
        let mut bp = Parameter { value: array![0.0], grad: array![8.0] };
        sgd_step(&mut [("a", &mut a), ("b", &mut bp)], 1.0, Some(5.0)).unwrap();
        assert!((a.value[0] + 3.0).abs() < 1e-12);
        assert!((bp.value[0] + 4.0).abs() < 1e-12);

        let mut z = Parameter { value: array![2.0], grad: array![0.0] };
        sgd_step(&mut [("z", &mut z)], 1.0, Some(5.0)).unwrap();
        assert_eq!(z.value, array![2.0]);
    }

    #[test]
    fn sgd_step_rejects_non_finite_gradients() {
        let mut w = Parameter { value: array![1.0], grad: array![f64::NAN] };
        let err = sgd_step(&mut [("w_bad", &mut w)], 1.0, None).unwrap_err();
        assert!(err.to_string().contains("w_bad"));
    }
}
