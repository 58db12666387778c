//! Reverse-mode automatic differentiation on a recording tape.
//!
//! A [`Graph`] owns an arena of tensor slots and a list of nodes in execution
//! order. Each op computes its output eagerly through the kernels in
//! [`crate::tensor`] and, when the graph is recording and the output needs a
//! gradient, pushes one node. [`Graph::backward`] replays the tape once in
//! reverse, accumulating gradients additively into shared inputs.
//!
//! Special primitives the interventions and metrics rely on:
//! * [`Graph::stop_gradient`] / [`Graph::sign`] — forward identity / signum,
//!   zero backward.
//! * [`Graph::masked_softmax`] — rows restricted to an allowed key set;
//!   disallowed entries are exactly zero.
//! * [`Graph::edge_stopgrad`] — identity forward, backward zeroed on a
//!   marked edge set.
//! * [`Graph::matmul_edge_stopgrad`] — plain matmul forward (same kernel,
//!   same accumulation order); backward treats marked edges as constants on
//!   both factors.
//! * [`Graph::row_masked_linear`] — plain `X·W` forward; `∂loss/∂W` only
//!   accumulates from rows whose mask entry is 1.

use std::sync::Arc;

use thiserror::Error;

use crate::tensor::{self, assert_finite, Tensor, TensorError};

/// Handle into a graph's tensor arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub usize);

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("loss must be scalar, got {0} elements")]
    NonScalarLoss(usize),
    #[error("non-finite gradient for tensor {0}")]
    NonFiniteGrad(usize),
    #[error("graph is in eval mode; nothing was recorded")]
    NotRecording,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

enum Storage {
    Owned(Vec<f64>),
    Shared(Arc<Vec<f64>>),
}

impl Storage {
    fn data(&self) -> &[f64] {
        match self {
            Storage::Owned(v) => v,
            Storage::Shared(a) => a,
        }
    }
}

struct Slot {
    shape: Vec<usize>,
    data: Storage,
    requires_grad: bool,
}

enum Node {
    Add { a: TensorId, b: TensorId, out: TensorId },
    Sub { a: TensorId, b: TensorId, out: TensorId },
    Mul { a: TensorId, b: TensorId, out: TensorId },
    MulScalar { x: TensorId, c: f64, out: TensorId },
    AddScalar { x: TensorId, out: TensorId },
    Reshape { x: TensorId, out: TensorId },
    AddBias { x: TensorId, bias: TensorId, out: TensorId },
    Matmul { a: TensorId, b: TensorId, out: TensorId, m: usize, k: usize, n: usize },
    MatmulNt { a: TensorId, b: TensorId, out: TensorId, m: usize, k: usize, n: usize },
    RowMaskedLinear {
        x: TensorId,
        w: TensorId,
        mask: Arc<Vec<f64>>,
        out: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    MatmulEdgeStopgrad {
        p: TensorId,
        v: TensorId,
        edges: Arc<Vec<bool>>,
        out: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    EdgeStopgrad { x: TensorId, edges: Arc<Vec<bool>>, out: TensorId },
    MaskedSoftmax { x: TensorId, allowed: Arc<Vec<bool>>, out: TensorId, rows: usize, cols: usize },
    Embedding { table: TensorId, ids: Arc<Vec<usize>>, out: TensorId, dim: usize },
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        out: TensorId,
        // saved per-row reciprocal std and normalized activations
        rstd: Vec<f64>,
        xhat: Vec<f64>,
        rows: usize,
        cols: usize,
    },
    Gelu { x: TensorId, out: TensorId },
    Sum { x: TensorId, out: TensorId },
    Mean { x: TensorId, out: TensorId },
    NllRows { logits: TensorId, rows: Arc<Vec<usize>>, targets: Arc<Vec<usize>>, out: TensorId, cols: usize },
    LogProbGather { logits: TensorId, rows: Arc<Vec<usize>>, targets: Arc<Vec<usize>>, out: TensorId, cols: usize },
    EntropyMeanRows { logits: TensorId, rows: Arc<Vec<usize>>, out: TensorId, cols: usize },
    Exp { x: TensorId, out: TensorId },
    Clamp { x: TensorId, lo: f64, hi: f64, out: TensorId },
    Minimum { a: TensorId, b: TensorId, out: TensorId },
    SliceCols { x: TensorId, start: usize, width: usize, out: TensorId, cols: usize },
    ConcatCols { xs: Vec<TensorId>, widths: Vec<usize>, out: TensorId },
    RowsMul { x: TensorId, mask: Arc<Vec<f64>>, out: TensorId, cols: usize },
    AddRowsAt { x: TensorId, delta: TensorId, positions: Arc<Vec<usize>>, out: TensorId, cols: usize },
}

/// Gradients returned by [`Graph::backward`], indexed by tensor id.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    numels: Vec<usize>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a tensor, if any flowed to it.
    pub fn wrt(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Gradient with unreachable tensors mapped to zeros.
    pub fn wrt_or_zeros(&self, id: TensorId) -> Vec<f64> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.numels[id.0]],
        }
    }
}

/// Recording tape. Single-writer while recording; immutable afterwards.
pub struct Graph {
    slots: Vec<Slot>,
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A recording graph: ops whose output needs a gradient push tape nodes.
    pub fn new() -> Self {
        Graph { slots: Vec::new(), nodes: Vec::new(), recording: true }
    }

    /// Eval-only graph: identical forward numerics, nothing recorded.
    pub fn eval() -> Self {
        Graph { slots: Vec::new(), nodes: Vec::new(), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        let rg = t.requires_grad && self.recording;
        self.push(t.shape, Storage::Owned(t.data), rg)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> TensorId {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape, Storage::Owned(data), false)
    }

    pub fn param(&mut self, shape: Vec<usize>, data: Vec<f64>) -> TensorId {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        let rg = self.recording;
        self.push(shape, Storage::Owned(data), rg)
    }

    /// Leaf backed by shared storage (model weights); no copy.
    pub fn shared(&mut self, shape: Vec<usize>, data: Arc<Vec<f64>>, requires_grad: bool) -> TensorId {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        let rg = requires_grad && self.recording;
        self.push(shape, Storage::Shared(data), rg)
    }

    fn push(&mut self, shape: Vec<usize>, data: Storage, requires_grad: bool) -> TensorId {
        self.slots.push(Slot { shape, data, requires_grad });
        TensorId(self.slots.len() - 1)
    }

    fn out(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> TensorId {
        self.push(shape, Storage::Owned(data), requires_grad && self.recording)
    }

    fn record(&mut self, needed: bool, node: impl FnOnce() -> Node) {
        if self.recording && needed {
            self.nodes.push(node());
        }
    }

    // ── Accessors ───────────────────────────────────────────────────────

    pub fn data(&self, id: TensorId) -> &[f64] {
        self.slots[id.0].data.data()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.slots[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> f64 {
        let d = self.data(id);
        assert_eq!(d.len(), 1, "value() on non-scalar tensor");
        d[0]
    }

    pub fn to_tensor(&self, id: TensorId) -> Tensor {
        Tensor::new(self.shape(id).to_vec(), self.data(id).to_vec())
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.slots[id.0].requires_grad
    }

    fn rows_cols(&self, id: TensorId) -> (usize, usize) {
        let s = self.shape(id);
        assert_eq!(s.len(), 2, "expected matrix, got shape {s:?}");
        (s[0], s[1])
    }

    // ── Element-wise ops ────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        assert_finite("add", &data);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let out = self.out(self.shape(a).to_vec(), data, rg);
        self.record(rg, || Node::Add { a, b, out });
        out
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        assert_finite("sub", &data);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let out = self.out(self.shape(a).to_vec(), data, rg);
        self.record(rg, || Node::Sub { a, b, out });
        out
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        assert_finite("mul", &data);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let out = self.out(self.shape(a).to_vec(), data, rg);
        self.record(rg, || Node::Mul { a, b, out });
        out
    }

    pub fn mul_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        assert_finite("mul_scalar", &data);
        let rg = self.requires_grad(x);
        let out = self.out(self.shape(x).to_vec(), data, rg);
        self.record(rg, || Node::MulScalar { x, c, out });
        out
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|v| v + c).collect();
        assert_finite("add_scalar", &data);
        let rg = self.requires_grad(x);
        let out = self.out(self.shape(x).to_vec(), data, rg);
        self.record(rg, || Node::AddScalar { x, out });
        out
    }

    /// Broadcast a `[n]` bias over the rows of `[m, n]`.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> TensorId {
        let (m, n) = self.rows_cols(x);
        assert_eq!(self.shape(bias), &[n], "bias shape mismatch");
        let b = self.data(bias).to_vec();
        let mut data = self.data(x).to_vec();
        for r in 0..m {
            for (v, bv) in data[r * n..(r + 1) * n].iter_mut().zip(&b) {
                *v += bv;
            }
        }
        assert_finite("add_bias", &data);
        let rg = self.requires_grad(x) || self.requires_grad(bias);
        let out = self.out(vec![m, n], data, rg);
        self.record(rg, || Node::AddBias { x, bias, out });
        out
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.exp()).collect();
        assert_finite("exp", &data);
        let rg = self.requires_grad(x);
        let out = self.out(self.shape(x).to_vec(), data, rg);
        self.record(rg, || Node::Exp { x, out });
        out
    }

    pub fn clamp(&mut self, x: TensorId, lo: f64, hi: f64) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.clamp(lo, hi)).collect();
        assert_finite("clamp", &data);
        let rg = self.requires_grad(x);
        let out = self.out(self.shape(x).to_vec(), data, rg);
        self.record(rg, || Node::Clamp { x, lo, hi, out });
        out
    }

    /// Element-wise minimum; gradient routes to the smaller argument
    /// (ties go to `a`).
    pub fn minimum(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "minimum shape mismatch");
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x.min(*y)).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let out = self.out(self.shape(a).to_vec(), data, rg);
        self.record(rg, || Node::Minimum { a, b, out });
        out
    }

    // ── Gradient-shaping primitives ─────────────────────────────────────

    /// Same data under a new shape; gradients flow through unchanged.
    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> TensorId {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data(x).len(),
            "reshape element count mismatch"
        );
        let rg = self.requires_grad(x);
        let out = self.out(shape, self.data(x).to_vec(), rg);
        self.record(rg, || Node::Reshape { x, out });
        out
    }

    /// Forward identity; contributes zero gradient to `x`.
    pub fn stop_gradient(&mut self, x: TensorId) -> TensorId {
        self.out(self.shape(x).to_vec(), self.data(x).to_vec(), false)
    }

    /// Element-wise sign in {-1, 0, +1}; constant under backward.
    pub fn sign(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .map(|&v| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect();
        self.out(self.shape(x).to_vec(), data, false)
    }

    /// Forward identity. Backward is zeroed exactly on `edges` and identity
    /// elsewhere, realizing `sg(G∘z) + (1−G)∘z` without perturbing a single
    /// forward bit.
    pub fn edge_stopgrad(&mut self, x: TensorId, edges: Arc<Vec<bool>>) -> TensorId {
        assert_eq!(self.data(x).len(), edges.len(), "edge mask shape mismatch");
        let rg = self.requires_grad(x);
        let out = self.out(self.shape(x).to_vec(), self.data(x).to_vec(), rg);
        self.record(rg, || Node::EdgeStopgrad { x, edges, out });
        out
    }

    // ── Matrix ops ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, k) = self.rows_cols(a);
        let (k2, n) = self.rows_cols(b);
        assert_eq!(k, k2, "matmul inner dim mismatch");
        let data = tensor::matmul(self.data(a), self.data(b), m, k, n);
        assert_finite("matmul", &data);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let out = self.out(vec![m, n], data, rg);
        self.record(rg, || Node::Matmul { a, b, out, m, k, n });
        out
    }

    /// `A[m,k] @ B[n,k]^T`.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, k) = self.rows_cols(a);
        let (n, k2) = self.rows_cols(b);
        assert_eq!(k, k2, "matmul_nt inner dim mismatch");
        let data = tensor::matmul_nt(self.data(a), self.data(b), m, k, n);
        assert_finite("matmul_nt", &data);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let out = self.out(vec![m, n], data, rg);
        self.record(rg, || Node::MatmulNt { a, b, out, m, k, n });
        out
    }

    /// `X·W` with the standard kernel; `∂loss/∂W` accumulates only from rows
    /// where `mask` is 1 while `∂loss/∂X` stays untouched.
    pub fn row_masked_linear(&mut self, x: TensorId, w: TensorId, mask: Arc<Vec<f64>>) -> TensorId {
        let (m, k) = self.rows_cols(x);
        let (k2, n) = self.rows_cols(w);
        assert_eq!(k, k2, "row_masked_linear inner dim mismatch");
        assert_eq!(mask.len(), m, "row mask length mismatch");
        let data = tensor::matmul(self.data(x), self.data(w), m, k, n);
        assert_finite("row_masked_linear", &data);
        let rg = self.requires_grad(x) || self.requires_grad(w);
        let out = self.out(vec![m, n], data, rg);
        self.record(rg, || Node::RowMaskedLinear { x, w, mask, out, m, k, n });
        out
    }

    /// `P·V` with the standard kernel and accumulation order; backward treats
    /// the contributions of marked `(row, key)` edges as constants on both
    /// `P` and `V`.
    pub fn matmul_edge_stopgrad(
        &mut self,
        p: TensorId,
        v: TensorId,
        edges: Arc<Vec<bool>>,
    ) -> TensorId {
        let (m, k) = self.rows_cols(p);
        let (k2, n) = self.rows_cols(v);
        assert_eq!(k, k2, "matmul_edge_stopgrad inner dim mismatch");
        assert_eq!(edges.len(), m * k, "edge mask shape mismatch");
        let data = tensor::matmul(self.data(p), self.data(v), m, k, n);
        assert_finite("matmul_edge_stopgrad", &data);
        let rg = self.requires_grad(p) || self.requires_grad(v);
        let out = self.out(vec![m, n], data, rg);
        self.record(rg, || Node::MatmulEdgeStopgrad { p, v, edges, out, m, k, n });
        out
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, width: usize) -> TensorId {
        let (m, n) = self.rows_cols(x);
        assert!(start + width <= n, "slice_cols out of range");
        let src = self.data(x);
        let mut data = Vec::with_capacity(m * width);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + start + width]);
        }
        let rg = self.requires_grad(x);
        let out = self.out(vec![m, width], data, rg);
        self.record(rg, || Node::SliceCols { x, start, width, out, cols: n });
        out
    }

    pub fn concat_cols(&mut self, xs: &[TensorId]) -> TensorId {
        assert!(!xs.is_empty());
        let m = self.rows_cols(xs[0]).0;
        let widths: Vec<usize> = xs
            .iter()
            .map(|&id| {
                let (r, c) = self.rows_cols(id);
                assert_eq!(r, m, "concat_cols row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&id, &w) in xs.iter().zip(&widths) {
                let src = self.data(id);
                data.extend_from_slice(&src[r * w..(r + 1) * w]);
            }
        }
        let rg = xs.iter().any(|&id| self.requires_grad(id));
        let out = self.out(vec![m, total], data, rg);
        let xs = xs.to_vec();
        self.record(rg, || Node::ConcatCols { xs, widths, out });
        out
    }

    /// Scale row `t` of `x` by `mask[t]` (mask is a non-differentiated
    /// attribute).
    pub fn rows_mul(&mut self, x: TensorId, mask: Arc<Vec<f64>>) -> TensorId {
        let (m, n) = self.rows_cols(x);
        assert_eq!(mask.len(), m, "rows_mul mask length mismatch");
        let mut data = self.data(x).to_vec();
        for (r, &mv) in mask.iter().enumerate() {
            for v in data[r * n..(r + 1) * n].iter_mut() {
                *v *= mv;
            }
        }
        assert_finite("rows_mul", &data);
        let rg = self.requires_grad(x);
        let out = self.out(vec![m, n], data, rg);
        self.record(rg, || Node::RowsMul { x, mask, out, cols: n });
        out
    }

    /// `out = x` with `delta[i, :]` added to row `positions[i]`.
    pub fn add_rows_at(
        &mut self,
        x: TensorId,
        delta: TensorId,
        positions: Arc<Vec<usize>>,
    ) -> TensorId {
        let (m, n) = self.rows_cols(x);
        let (dm, dn) = self.rows_cols(delta);
        assert_eq!(dn, n, "delta width mismatch");
        assert_eq!(dm, positions.len(), "delta rows must match positions");
        let dd = self.data(delta).to_vec();
        let mut data = self.data(x).to_vec();
        for (i, &p) in positions.iter().enumerate() {
            assert!(p < m, "inject position out of range");
            for (v, dv) in data[p * n..(p + 1) * n].iter_mut().zip(&dd[i * n..(i + 1) * n]) {
                *v += dv;
            }
        }
        assert_finite("add_rows_at", &data);
        let rg = self.requires_grad(x) || self.requires_grad(delta);
        let out = self.out(vec![m, n], data, rg);
        self.record(rg, || Node::AddRowsAt { x, delta, positions, out, cols: n });
        out
    }

    /// Gather rows of `table` by token id; backward scatter-adds.
    pub fn embedding(&mut self, table: TensorId, ids: Arc<Vec<usize>>) -> TensorId {
        let (v, d) = self.rows_cols(table);
        let src = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &t in ids.iter() {
            assert!(t < v, "token id {t} out of vocab {v}");
            data.extend_from_slice(&src[t * d..(t + 1) * d]);
        }
        let rg = self.requires_grad(table);
        let out = self.out(vec![ids.len(), d], data, rg);
        self.record(rg, || Node::Embedding { table, ids, out, dim: d });
        out
    }

    /// Per-row layer normalization with learned gain and shift.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> TensorId {
        const EPS: f64 = 1e-5;
        let (m, n) = self.rows_cols(x);
        assert_eq!(self.shape(gamma), &[n]);
        assert_eq!(self.shape(beta), &[n]);
        let src = self.data(x);
        let g = self.data(gamma).to_vec();
        let b = self.data(beta).to_vec();
        let mut data = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut xhat = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                data[r * n + c] = h * g[c] + b[c];
            }
        }
        assert_finite("layer_norm", &data);
        let rg =
            self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        let out = self.out(vec![m, n], data, rg);
        self.record(rg, || Node::LayerNorm { x, gamma, beta, out, rstd, xhat, rows: m, cols: n });
        out
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|&v| gelu_fwd(v)).collect();
        assert_finite("gelu", &data);
        let rg = self.requires_grad(x);
        let out = self.out(self.shape(x).to_vec(), data, rg);
        self.record(rg, || Node::Gelu { x, out });
        out
    }

    /// Row-wise softmax over the allowed key set; errors on a fully masked
    /// row. With an all-true mask this is exactly the stabilized softmax.
    pub fn masked_softmax(
        &mut self,
        x: TensorId,
        allowed: Arc<Vec<bool>>,
    ) -> Result<TensorId, GraphError> {
        let (m, n) = self.rows_cols(x);
        assert_eq!(allowed.len(), m * n, "softmax mask shape mismatch");
        let mut data = self.data(x).to_vec();
        for r in 0..m {
            tensor::masked_softmax_row(&mut data[r * n..(r + 1) * n], &allowed[r * n..(r + 1) * n])
                .map_err(|_| TensorError::FullyMaskedRow(r))?;
        }
        assert_finite("masked_softmax", &data);
        let rg = self.requires_grad(x);
        let out = self.out(vec![m, n], data, rg);
        self.record(rg, || Node::MaskedSoftmax { x, allowed, out, rows: m, cols: n });
        Ok(out)
    }

    pub fn softmax(&mut self, x: TensorId) -> TensorId {
        let n = self.data(x).len();
        self.masked_softmax(x, Arc::new(vec![true; n]))
            .expect("unmasked softmax cannot have fully masked rows")
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.data(x).iter().sum();
        assert_finite("sum", &[s]);
        let rg = self.requires_grad(x);
        let out = self.out(vec![1], vec![s], rg);
        self.record(rg, || Node::Sum { x, out });
        out
    }

    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let n = self.data(x).len();
        let s: f64 = self.data(x).iter().sum::<f64>() / n as f64;
        assert_finite("mean", &[s]);
        let rg = self.requires_grad(x);
        let out = self.out(vec![1], vec![s], rg);
        self.record(rg, || Node::Mean { x, out });
        out
    }

    /// Mean negative log-likelihood of `targets[i]` under the log-softmax of
    /// `logits` row `rows[i]`.
    pub fn nll_rows(
        &mut self,
        logits: TensorId,
        rows: Arc<Vec<usize>>,
        targets: Arc<Vec<usize>>,
    ) -> TensorId {
        assert_eq!(rows.len(), targets.len());
        assert!(!rows.is_empty(), "nll_rows over empty row set");
        let (m, n) = self.rows_cols(logits);
        let src = self.data(logits);
        let mut acc = 0.0;
        for (&r, &t) in rows.iter().zip(targets.iter()) {
            assert!(r < m && t < n, "nll_rows index out of range");
            let lp = tensor::log_softmax_row(&src[r * n..(r + 1) * n]);
            acc -= lp[t];
        }
        let loss = acc / rows.len() as f64;
        assert_finite("nll_rows", &[loss]);
        let rg = self.requires_grad(logits);
        let out = self.out(vec![1], vec![loss], rg);
        self.record(rg, || Node::NllRows { logits, rows, targets, out, cols: n });
        out
    }

    /// Log-probability of `targets[i]` at `logits` row `rows[i]`, as a vector.
    pub fn log_prob_gather(
        &mut self,
        logits: TensorId,
        rows: Arc<Vec<usize>>,
        targets: Arc<Vec<usize>>,
    ) -> TensorId {
        assert_eq!(rows.len(), targets.len());
        let (m, n) = self.rows_cols(logits);
        let src = self.data(logits);
        let mut data = Vec::with_capacity(rows.len());
        for (&r, &t) in rows.iter().zip(targets.iter()) {
            assert!(r < m && t < n, "log_prob_gather index out of range");
            let lp = tensor::log_softmax_row(&src[r * n..(r + 1) * n]);
            data.push(lp[t]);
        }
        assert_finite("log_prob_gather", &data);
        let rg = self.requires_grad(logits);
        let out = self.out(vec![rows.len()], data, rg);
        self.record(rg, || Node::LogProbGather { logits, rows, targets, out, cols: n });
        out
    }

    /// Mean softmax entropy (nats) over the selected logits rows.
    pub fn entropy_mean_rows(&mut self, logits: TensorId, rows: Arc<Vec<usize>>) -> TensorId {
        assert!(!rows.is_empty(), "entropy_mean_rows over empty row set");
        let (m, n) = self.rows_cols(logits);
        let src = self.data(logits);
        let mut acc = 0.0;
        for &r in rows.iter() {
            assert!(r < m);
            acc += tensor::row_entropy_slice(&src[r * n..(r + 1) * n]);
        }
        let h = acc / rows.len() as f64;
        let rg = self.requires_grad(logits);
        let out = self.out(vec![1], vec![h], rg);
        self.record(rg, || Node::EntropyMeanRows { logits, rows, out, cols: n });
        out
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`. Every node is visited exactly once
    /// and gradients accumulate additively into shared inputs.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients, GraphError> {
        if !self.recording {
            return Err(GraphError::NotRecording);
        }
        let ld = self.data(loss);
        if ld.len() != 1 {
            return Err(GraphError::NonScalarLoss(ld.len()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.slots.len()];
        grads[loss.0] = Some(vec![1.0]);

        for node in self.nodes.iter().rev() {
            self.backward_node(node, &mut grads);
        }

        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(GraphError::NonFiniteGrad(i));
                }
            }
        }
        let numels = self.slots.iter().map(|s| s.data.data().len()).collect();
        Ok(Gradients { grads, numels })
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], id: TensorId, delta: &[f64]) {
        if !self.slots[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => grads[id.0] = Some(delta.to_vec()),
        }
    }

    fn backward_node(&self, node: &Node, grads: &mut Vec<Option<Vec<f64>>>) {
        match node {
            Node::Add { a, b, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                self.accum(grads, *a, &g);
                self.accum(grads, *b, &g);
            }
            Node::Sub { a, b, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                self.accum(grads, *a, &g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accum(grads, *b, &neg);
            }
            Node::Mul { a, b, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let da: Vec<f64> = g.iter().zip(self.data(*b)).map(|(x, y)| x * y).collect();
                self.accum(grads, *a, &da);
                let db: Vec<f64> = g.iter().zip(self.data(*a)).map(|(x, y)| x * y).collect();
                self.accum(grads, *b, &db);
            }
            Node::MulScalar { x, c, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.accum(grads, *x, &dx);
            }
            Node::AddScalar { x, out } | Node::Reshape { x, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                self.accum(grads, *x, &g);
            }
            Node::AddBias { x, bias, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                self.accum(grads, *x, &g);
                let n = self.data(*bias).len();
                let mut db = vec![0.0; n];
                for (i, v) in g.iter().enumerate() {
                    db[i % n] += v;
                }
                self.accum(grads, *bias, &db);
            }
            Node::Matmul { a, b, out, m, k, n } => {
                let Some(g) = grads[out.0].clone() else { return };
                if self.requires_grad(*a) {
                    let da = tensor::matmul_nt(&g, self.data(*b), *m, *n, *k);
                    self.accum(grads, *a, &da);
                }
                if self.requires_grad(*b) {
                    let db = tensor::matmul_tn(self.data(*a), &g, *m, *k, *n);
                    self.accum(grads, *b, &db);
                }
            }
            Node::MatmulNt { a, b, out, m, k, n } => {
                let Some(g) = grads[out.0].clone() else { return };
                if self.requires_grad(*a) {
                    let da = tensor::matmul(&g, self.data(*b), *m, *n, *k);
                    self.accum(grads, *a, &da);
                }
                if self.requires_grad(*b) {
                    let db = tensor::matmul_tn(&g, self.data(*a), *m, *n, *k);
                    self.accum(grads, *b, &db);
                }
            }
            Node::RowMaskedLinear { x, w, mask, out, m, k, n } => {
                let Some(g) = grads[out.0].clone() else { return };
                if self.requires_grad(*x) {
                    let dx = tensor::matmul_nt(&g, self.data(*w), *m, *n, *k);
                    self.accum(grads, *x, &dx);
                }
                if self.requires_grad(*w) {
                    let mut xm = self.data(*x).to_vec();
                    for (r, &mv) in mask.iter().enumerate() {
                        if mv != 1.0 {
                            for v in xm[r * k..(r + 1) * k].iter_mut() {
                                *v *= mv;
                            }
                        }
                    }
                    let dw = tensor::matmul_tn(&xm, &g, *m, *k, *n);
                    self.accum(grads, *w, &dw);
                }
            }
            Node::MatmulEdgeStopgrad { p, v, edges, out, m, k, n } => {
                let Some(g) = grads[out.0].clone() else { return };
                if self.requires_grad(*p) {
                    let mut dp = tensor::matmul_nt(&g, self.data(*v), *m, *n, *k);
                    for (d, &e) in dp.iter_mut().zip(edges.iter()) {
                        if e {
                            *d = 0.0;
                        }
                    }
                    self.accum(grads, *p, &dp);
                }
                if self.requires_grad(*v) {
                    let mut pm = self.data(*p).to_vec();
                    for (d, &e) in pm.iter_mut().zip(edges.iter()) {
                        if e {
                            *d = 0.0;
                        }
                    }
                    let dv = tensor::matmul_tn(&pm, &g, *m, *k, *n);
                    self.accum(grads, *v, &dv);
                }
            }
            Node::EdgeStopgrad { x, edges, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let dx: Vec<f64> =
                    g.iter().zip(edges.iter()).map(|(v, &e)| if e { 0.0 } else { *v }).collect();
                self.accum(grads, *x, &dx);
            }
            Node::MaskedSoftmax { x, allowed, out, rows, cols } => {
                let Some(g) = grads[out.0].clone() else { return };
                let p = self.data(*out);
                let n = *cols;
                let mut dx = vec![0.0; rows * cols];
                for r in 0..*rows {
                    let pr = &p[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let ar = &allowed[r * n..(r + 1) * n];
                    for c in 0..n {
                        if ar[c] {
                            dx[r * n + c] = pr[c] * (gr[c] - dot);
                        }
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Node::Embedding { table, ids, out, dim } => {
                let Some(g) = grads[out.0].clone() else { return };
                let v = self.rows_cols(*table).0;
                let mut dt = vec![0.0; v * dim];
                for (i, &t) in ids.iter().enumerate() {
                    for c in 0..*dim {
                        dt[t * dim + c] += g[i * dim + c];
                    }
                }
                self.accum(grads, *table, &dt);
            }
            Node::LayerNorm { x, gamma, beta, out, rstd, xhat, rows, cols } => {
                let Some(g) = grads[out.0].clone() else { return };
                let n = *cols;
                let gam = self.data(*gamma);
                if self.requires_grad(*beta) {
                    let mut db = vec![0.0; n];
                    for r in 0..*rows {
                        for c in 0..n {
                            db[c] += g[r * n + c];
                        }
                    }
                    self.accum(grads, *beta, &db);
                }
                if self.requires_grad(*gamma) {
                    let mut dg = vec![0.0; n];
                    for r in 0..*rows {
                        for c in 0..n {
                            dg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                    self.accum(grads, *gamma, &dg);
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; rows * n];
                    for r in 0..*rows {
                        let mut mean_gd = 0.0;
                        let mut mean_gdx = 0.0;
                        for c in 0..n {
                            let gd = g[r * n + c] * gam[c];
                            mean_gd += gd;
                            mean_gdx += gd * xhat[r * n + c];
                        }
                        mean_gd /= n as f64;
                        mean_gdx /= n as f64;
                        for c in 0..n {
                            let gd = g[r * n + c] * gam[c];
                            dx[r * n + c] =
                                rstd[r] * (gd - mean_gd - xhat[r * n + c] * mean_gdx);
                        }
                    }
                    self.accum(grads, *x, &dx);
                }
            }
            Node::Gelu { x, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let dx: Vec<f64> =
                    g.iter().zip(self.data(*x)).map(|(gv, &xv)| gv * gelu_bwd(xv)).collect();
                self.accum(grads, *x, &dx);
            }
            Node::Sum { x, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let dx = vec![g[0]; self.data(*x).len()];
                self.accum(grads, *x, &dx);
            }
            Node::Mean { x, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let n = self.data(*x).len();
                let dx = vec![g[0] / n as f64; n];
                self.accum(grads, *x, &dx);
            }
            Node::NllRows { logits, rows, targets, out, cols } => {
                let Some(g) = grads[out.0].clone() else { return };
                let scale = g[0] / rows.len() as f64;
                let src = self.data(*logits);
                let n = *cols;
                let mut dz = vec![0.0; src.len()];
                for (&r, &t) in rows.iter().zip(targets.iter()) {
                    let p = tensor::softmax_row(&src[r * n..(r + 1) * n]);
                    for c in 0..n {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        dz[r * n + c] += scale * (p[c] - onehot);
                    }
                }
                self.accum(grads, *logits, &dz);
            }
            Node::LogProbGather { logits, rows, targets, out, cols } => {
                let Some(g) = grads[out.0].clone() else { return };
                let src = self.data(*logits);
                let n = *cols;
                let mut dz = vec![0.0; src.len()];
                for (i, (&r, &t)) in rows.iter().zip(targets.iter()).enumerate() {
                    let p = tensor::softmax_row(&src[r * n..(r + 1) * n]);
                    for c in 0..n {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        dz[r * n + c] += g[i] * (onehot - p[c]);
                    }
                }
                self.accum(grads, *logits, &dz);
            }
            Node::EntropyMeanRows { logits, rows, out, cols } => {
                let Some(g) = grads[out.0].clone() else { return };
                let scale = g[0] / rows.len() as f64;
                let src = self.data(*logits);
                let n = *cols;
                let mut dz = vec![0.0; src.len()];
                for &r in rows.iter() {
                    let row = &src[r * n..(r + 1) * n];
                    let lp = tensor::log_softmax_row(row);
                    let h = tensor::row_entropy_slice(row);
                    for c in 0..n {
                        let p = lp[c].exp();
                        // dH/dz_c = -p_c (log p_c + H)
                        dz[r * n + c] += scale * (-p * (lp[c] + h));
                    }
                }
                self.accum(grads, *logits, &dz);
            }
            Node::Exp { x, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let dx: Vec<f64> =
                    g.iter().zip(self.data(*out)).map(|(gv, ov)| gv * ov).collect();
                self.accum(grads, *x, &dx);
            }
            Node::Clamp { x, lo, hi, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(gv, &xv)| if xv >= *lo && xv <= *hi { *gv } else { 0.0 })
                    .collect();
                self.accum(grads, *x, &dx);
            }
            Node::Minimum { a, b, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let av = self.data(*a);
                let bv = self.data(*b);
                let da: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| if av[i] <= bv[i] { *gv } else { 0.0 })
                    .collect();
                self.accum(grads, *a, &da);
                let db: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| if av[i] <= bv[i] { 0.0 } else { *gv })
                    .collect();
                self.accum(grads, *b, &db);
            }
            Node::SliceCols { x, start, width, out, cols } => {
                let Some(g) = grads[out.0].clone() else { return };
                let m = self.data(*out).len() / width;
                let mut dx = vec![0.0; m * cols];
                for r in 0..m {
                    dx[r * cols + start..r * cols + start + width]
                        .copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                self.accum(grads, *x, &dx);
            }
            Node::ConcatCols { xs, widths, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let total: usize = widths.iter().sum();
                let m = g.len() / total;
                let mut offset = 0;
                for (&id, &w) in xs.iter().zip(widths) {
                    if self.requires_grad(id) {
                        let mut dx = vec![0.0; m * w];
                        for r in 0..m {
                            dx[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.accum(grads, id, &dx);
                    }
                    offset += w;
                }
            }
            Node::RowsMul { x, mask, out, cols } => {
                let Some(g) = grads[out.0].clone() else { return };
                let mut dx = g;
                for (r, &mv) in mask.iter().enumerate() {
                    for v in dx[r * cols..(r + 1) * cols].iter_mut() {
                        *v *= mv;
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Node::AddRowsAt { x, delta, positions, out, cols } => {
                let Some(g) = grads[out.0].clone() else { return };
                self.accum(grads, *x, &g);
                if self.requires_grad(*delta) {
                    let mut dd = vec![0.0; positions.len() * cols];
                    for (i, &p) in positions.iter().enumerate() {
                        dd[i * cols..(i + 1) * cols]
                            .copy_from_slice(&g[p * cols..(p + 1) * cols]);
                    }
                    self.accum(grads, *delta, &dd);
                }
            }
        }
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_square_sum() {
        // loss = sum(x ∘ x), x = [1, 2] → grad [2, 4]
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).with_grad());
        let sq = g.mul(x, x);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_unreachable_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).with_grad());
        let y = g.leaf(Tensor::new(vec![2], vec![3.0, 4.0]).with_grad());
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(x).is_none());
        assert_eq!(grads.wrt_or_zeros(x), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).with_grad());
        let y = g.mul(x, x);
        assert!(matches!(g.backward(y), Err(GraphError::NonScalarLoss(2))));
    }

    #[test]
    fn stop_gradient_identity_forward_zero_backward() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).with_grad());
        let s = g.stop_gradient(x);
        assert_eq!(g.data(s), g.data(x));
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(x).is_none());
    }

    #[test]
    fn stop_gradient_only_live_path_counts() {
        // loss = sum(x + sg(x)) → grad(x) = 1 everywhere
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![0.3, -0.7]).with_grad());
        let s = g.stop_gradient(x);
        let y = g.add(x, s);
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn sign_values_and_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![-2.5, 0.0, 3.1]).with_grad());
        let s = g.sign(x);
        assert_eq!(g.data(s), &[-1.0, 0.0, 1.0]);
        let s2 = g.sign(s);
        assert_eq!(g.data(s2), g.data(s)); // idempotent
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(x).is_none());
    }

    #[test]
    fn masked_softmax_zero_rows_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).with_grad());
        let r = g.masked_softmax(x, Arc::new(vec![false, false]));
        assert!(r.is_err());
    }

    #[test]
    fn edge_stopgrad_blocks_selected_edges() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).with_grad());
        let edges = Arc::new(vec![true, false, false, true]);
        let y = g.edge_stopgrad(x, edges);
        assert_eq!(g.data(y), g.data(x));
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn edge_stopgrad_matches_literal_formula() {
        // Dual route: the primitive vs sg(G∘z) + (1−G)∘z written out.
        let z_data = vec![0.5, -1.5, 2.0, 0.25, 1.0, -0.75];
        let edges = [false, true, false, true, true, false];
        let g_mask: Vec<f64> = edges.iter().map(|&e| if e { 1.0 } else { 0.0 }).collect();
        let inv_mask: Vec<f64> = g_mask.iter().map(|v| 1.0 - v).collect();

        let mut g1 = Graph::new();
        let z1 = g1.leaf(Tensor::new(vec![2, 3], z_data.clone()).with_grad());
        let y1 = g1.edge_stopgrad(z1, Arc::new(edges.to_vec()));
        let w1 = g1.constant(vec![2, 3], vec![0.3, 1.2, -0.4, 0.9, -2.0, 0.1]);
        let p1 = g1.mul(y1, w1);
        let l1 = g1.sum(p1);
        let grads1 = g1.backward(l1).unwrap();

        let mut g2 = Graph::new();
        let z2 = g2.leaf(Tensor::new(vec![2, 3], z_data).with_grad());
        let gm = g2.constant(vec![2, 3], g_mask);
        let im = g2.constant(vec![2, 3], inv_mask);
        let zg = g2.mul(z2, gm);
        let sg = g2.stop_gradient(zg);
        let zi = g2.mul(z2, im);
        let y2 = g2.add(sg, zi);
        assert_eq!(g2.data(y2), g1.data(y1));
        let w2 = g2.constant(vec![2, 3], vec![0.3, 1.2, -0.4, 0.9, -2.0, 0.1]);
        let p2 = g2.mul(y2, w2);
        let l2 = g2.sum(p2);
        let grads2 = g2.backward(l2).unwrap();

        assert_eq!(grads1.wrt(z1).unwrap(), grads2.wrt(z2).unwrap());
    }

    #[test]
    fn eval_graph_records_nothing() {
        let mut g = Graph::eval();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).with_grad());
        let y = g.mul(x, x);
        let _ = g.sum(y);
        assert_eq!(g.num_nodes(), 0);
    }

    #[test]
    fn gradient_accumulates_into_shared_input() {
        // y = x*x + x → dy/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1], vec![3.0]).with_grad());
        let xx = g.mul(x, x);
        let y = g.add(xx, x);
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[7.0]);
    }
}
