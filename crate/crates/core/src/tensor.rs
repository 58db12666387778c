//! Dense row-major tensors and the pure numeric kernels shared by the
//! autodiff graph and the metric code.
//!
//! Everything is `f64`. Metric reductions (KL, entropy) run in log-space with
//! max-subtraction and accumulate in 64-bit; probabilities below `PROB_FLOOR`
//! clamp their log term so near-one-hot rows cannot produce `-inf * 0`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probability floor for log terms in KL/entropy reductions.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("fully masked softmax row {0}")]
    FullyMaskedRow(usize),
}

/// Dense tensor: `shape` with row-major `data`, `product(shape) == data.len()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data, requires_grad: false }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], requires_grad: false }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has no dimensions")
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Panics when `data` holds a NaN/Inf; primitives call this on every output.
pub fn assert_finite(op: &'static str, data: &[f64]) {
    for &v in data {
        assert!(v.is_finite(), "non-finite value produced by {op}");
    }
}

// ── Dense kernels ───────────────────────────────────────────────────────

/// C[m×n] = A[m×k] @ B[k×n]. Zero entries of A are skipped, so a zeroed row
/// of A yields an exactly-zero output row at no cost.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

/// C[m×n] = A[m×k] @ B[n×k]^T.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// C[k×n] = A[m×k]^T @ B[m×n].
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

/// In-place softmax of one row restricted to `allowed` keys, with
/// max-subtraction over the allowed set. Disallowed entries become exactly 0.
pub fn masked_softmax_row(row: &mut [f64], allowed: &[bool]) -> Result<(), TensorError> {
    debug_assert_eq!(row.len(), allowed.len());
    let mut max = f64::NEG_INFINITY;
    for (v, &a) in row.iter().zip(allowed) {
        if a && *v > max {
            max = *v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(TensorError::FullyMaskedRow(0));
    }
    let mut sum = 0.0;
    for (v, &a) in row.iter_mut().zip(allowed) {
        if a {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

/// Softmax probabilities of a logit row (all keys allowed).
pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    let allowed = vec![true; logits.len()];
    masked_softmax_row(&mut out, &allowed).expect("unmasked row cannot be fully masked");
    out
}

/// Log-softmax of a logit row, max-subtracted.
pub fn log_softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|v| v - log_z).collect()
}

/// KL(p ‖ q) per row for two logit tensors of identical shape, in nats.
///
/// Computed in log-space: Σ p·(log p − log q), with log terms clamped below
/// `PROB_FLOOR`. Identical rows give exactly 0.
pub fn row_kl(p_logits: &Tensor, q_logits: &Tensor) -> Result<Vec<f64>, TensorError> {
    if p_logits.shape != q_logits.shape {
        return Err(TensorError::ShapeMismatch(p_logits.shape.clone(), q_logits.shape.clone()));
    }
    let rows = p_logits.rows();
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        out.push(row_kl_slice(p_logits.row(r), q_logits.row(r)));
    }
    Ok(out)
}

/// KL(p ‖ q) in nats for a single pair of logit rows.
pub fn row_kl_slice(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    debug_assert_eq!(p_logits.len(), q_logits.len());
    let lp = log_softmax_row(p_logits);
    let lq = log_softmax_row(q_logits);
    let mut acc = 0.0;
    for (&a, &b) in lp.iter().zip(lq.iter()) {
        let p = a.exp();
        if p > PROB_FLOOR {
            acc += p * (a - b);
        }
    }
    // KL is non-negative; tiny negative residue is cancellation noise.
    acc.max(0.0)
}

/// Shannon entropy in nats of each logit row after softmax.
pub fn row_entropy(logits: &Tensor) -> Vec<f64> {
    (0..logits.rows()).map(|r| row_entropy_slice(logits.row(r))).collect()
}

/// Entropy in nats for one logit row: 0 for one-hot, ln(V) for uniform.
pub fn row_entropy_slice(logits: &[f64]) -> f64 {
    let lp = log_softmax_row(logits);
    let mut acc = 0.0;
    for &a in &lp {
        let p = a.exp();
        if p > PROB_FLOOR {
            acc -= p * a;
        }
    }
    acc.max(0.0)
}
