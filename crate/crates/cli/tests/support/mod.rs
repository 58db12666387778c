//! Shared oracles for the acceptance suite: central finite differences and
//! an independently written transformer forward that rebuilds attention
//! masks and gradient-freezing from scratch, using only the basic graph
//! primitives (no stop-gradient, no edge/row-masked ops, none of the
//! model's own forward code).

use std::sync::Arc;

use cotlab::graph::{Graph, TensorId};
use cotlab::model::Model;
use cotlab::roles::{Role, RoleSpans};
use cotlab::tensor::{self, Tensor};

pub const FD_H: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-6;

/// Relative error with an absolute floor for near-zero pairs.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-9 {
        (a - b).abs()
    } else {
        (a - b).abs() / denom
    }
}

/// Central-difference check of `build` (inputs → scalar loss) against the
/// graph's backward, probing up to `probes_per_input` coordinates of every
/// input. Returns the number of coordinates checked.
pub fn fd_check<F>(inputs: &[Vec<f64>], probes_per_input: usize, build: F) -> usize
where
    F: Fn(&mut Graph, &[TensorId]) -> TensorId,
{
    let make_ids = |g: &mut Graph, vals: &[Vec<f64>]| -> Vec<TensorId> {
        vals.iter()
            .map(|v| g.leaf(Tensor::new(vec![v.len()], v.clone()).with_grad()))
            .collect()
    };
    let mut g = Graph::new();
    let ids = make_ids(&mut g, inputs);
    let loss = build(&mut g, &ids);
    let analytic = g.backward(loss).expect("backward must succeed on finite inputs");

    let eval = |vals: &[Vec<f64>]| -> f64 {
        let mut g = Graph::eval();
        let ids: Vec<TensorId> =
            vals.iter().map(|v| g.leaf(Tensor::new(vec![v.len()], v.clone()))).collect();
        let loss = build(&mut g, &ids);
        g.value(loss)
    };

    let mut checked = 0;
    for (i, input) in inputs.iter().enumerate() {
        let grad = analytic.wrt_or_zeros(ids[i]);
        let stride = (input.len() / probes_per_input).max(1);
        for j in (0..input.len()).step_by(stride) {
            let mut plus = inputs.to_vec();
            plus[i][j] += FD_H;
            let mut minus = inputs.to_vec();
            minus[i][j] -= FD_H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_H);
            let err = rel_err(grad[j], fd);
            assert!(
                err < FD_TOL,
                "finite difference mismatch at input {i} coord {j}: analytic {} vs fd {} (rel {err:.2e})",
                grad[j],
                fd
            );
            checked += 1;
        }
    }
    checked
}

/// Attention treatment for the oracle forward.
pub enum OracleAttention {
    /// Caller-supplied allowed matrix, rebuilt independently of the model's
    /// policy code.
    Masked(Arc<Vec<bool>>),
    /// Full causal attention with the contributions of `edges` frozen as
    /// constants in both the logit row (softmax input) and the value sum.
    FrozenEdges { causal: Arc<Vec<bool>>, edges: Vec<bool> },
}

/// Causal allowed matrix built from first principles.
pub fn causal_mask(len: usize) -> Arc<Vec<bool>> {
    let mut m = vec![false; len * len];
    for i in 0..len {
        for j in 0..=i {
            m[i * len + j] = true;
        }
    }
    Arc::new(m)
}

/// Independent reconstruction of the spec's blocked-attention rule: causal,
/// minus edges from answer queries to keys of the blocked role.
pub fn blocked_mask(spans: &RoleSpans, len: usize, blocked_key: Role) -> Arc<Vec<bool>> {
    let roles = spans.roles(len);
    let mut m = (*causal_mask(len)).clone();
    for i in 0..len {
        for j in 0..len {
            if roles[i] == Role::Answer && roles[j] == blocked_key {
                m[i * len + j] = false;
            }
        }
    }
    Arc::new(m)
}

/// Answer→prompt edge indicator, rebuilt independently.
pub fn answer_prompt_edges(spans: &RoleSpans, len: usize) -> Vec<bool> {
    let roles = spans.roles(len);
    let mut e = vec![false; len * len];
    for i in 0..len {
        for j in 0..len {
            if roles[i] == Role::Answer && roles[j] == Role::Prompt {
                e[i * len + j] = true;
            }
        }
    }
    e
}

pub struct OracleForward {
    pub logits: TensorId,
    /// (model parameter index, graph leaf id)
    pub param_leaves: Vec<(usize, TensorId)>,
}

/// From-scratch transformer forward over the model's weights: pre-norm
/// blocks, per-head attention, GELU MLP, final norm, untied head. Gradient
/// freezing is expressed with constant 0/1 masks and constant leaves only.
pub fn oracle_forward(
    model: &Model,
    tokens: &[usize],
    attn: &OracleAttention,
    g: &mut Graph,
) -> OracleForward {
    let cfg = &model.cfg;
    let len = tokens.len();
    let d = cfg.d_model;
    let nh = cfg.heads;
    let dh = d / nh;
    let mut leaves = Vec::new();

    let param = |g: &mut Graph, leaves: &mut Vec<(usize, TensorId)>, name: &str| -> TensorId {
        let idx = model.param_index(name).unwrap_or_else(|| panic!("missing param {name}"));
        let t = Tensor::new(model.param_shape(idx).to_vec(), model.param_data(idx).to_vec())
            .with_grad();
        let id = g.leaf(t);
        leaves.push((idx, id));
        id
    };

    let tok = param(g, &mut leaves, "tok_emb");
    let pos = param(g, &mut leaves, "pos_emb");
    let te = g.embedding(tok, Arc::new(tokens.to_vec()));
    let pe = g.embedding(pos, Arc::new((0..len).collect()));
    let mut h = g.add(te, pe);

    for l in 0..cfg.layers {
        let ln1g = param(g, &mut leaves, &format!("layer{l}.ln1.g"));
        let ln1b = param(g, &mut leaves, &format!("layer{l}.ln1.b"));
        let x = g.layer_norm(h, ln1g, ln1b);

        let proj = |g: &mut Graph, leaves: &mut Vec<(usize, TensorId)>, w: &str, b: &str| {
            let wi = param(g, leaves, w);
            let bi = param(g, leaves, b);
            let y = g.matmul(x, wi);
            g.add_bias(y, bi)
        };
        let q = proj(g, &mut leaves, &format!("layer{l}.attn.wq"), &format!("layer{l}.attn.bq"));
        let k = proj(g, &mut leaves, &format!("layer{l}.attn.wk"), &format!("layer{l}.attn.bk"));
        let v = proj(g, &mut leaves, &format!("layer{l}.attn.wv"), &format!("layer{l}.attn.bv"));

        let mut heads = Vec::new();
        for hh in 0..nh {
            let qh = g.slice_cols(q, hh * dh, dh);
            let kh = g.slice_cols(k, hh * dh, dh);
            let vh = g.slice_cols(v, hh * dh, dh);
            let scores = g.matmul_nt(qh, kh);
            let z = g.mul_scalar(scores, 1.0 / (dh as f64).sqrt());
            let ctx = match attn {
                OracleAttention::Masked(allowed) => {
                    let probs = g.masked_softmax(z, Arc::clone(allowed)).expect("valid mask");
                    g.matmul(probs, vh)
                }
                OracleAttention::FrozenEdges { causal, edges } => {
                    // z_mixed: live off-edge entries, constant on-edge values
                    let keep: Vec<f64> =
                        edges.iter().map(|&e| if e { 0.0 } else { 1.0 }).collect();
                    let z_vals = g.data(z).to_vec();
                    let frozen_z: Vec<f64> = z_vals
                        .iter()
                        .zip(edges)
                        .map(|(&zv, &e)| if e { zv } else { 0.0 })
                        .collect();
                    let keep_c = g.constant(vec![len, len], keep.clone());
                    let frozen_c = g.constant(vec![len, len], frozen_z);
                    let z_live = g.mul(z, keep_c);
                    let z_mixed = g.add(z_live, frozen_c);
                    let probs = g.masked_softmax(z_mixed, Arc::clone(causal)).expect("causal");
                    // value path: live part uses off-edge probabilities only,
                    // the on-edge contribution enters as a constant matrix
                    let keep_c2 = g.constant(vec![len, len], keep);
                    let probs_live = g.mul(probs, keep_c2);
                    let live_ctx = g.matmul(probs_live, vh);
                    let p_vals = g.data(probs).to_vec();
                    let p_frozen: Vec<f64> = p_vals
                        .iter()
                        .zip(edges)
                        .map(|(&pv, &e)| if e { pv } else { 0.0 })
                        .collect();
                    let const_ctx =
                        tensor::matmul(&p_frozen, g.data(vh), len, len, dh);
                    let const_ctx = g.constant(vec![len, dh], const_ctx);
                    g.add(live_ctx, const_ctx)
                }
            };
            heads.push(ctx);
        }
        let ctx = g.concat_cols(&heads);
        let wo = param(g, &mut leaves, &format!("layer{l}.attn.wo"));
        let bo = param(g, &mut leaves, &format!("layer{l}.attn.bo"));
        let amm = g.matmul(ctx, wo);
        let attn_out = g.add_bias(amm, bo);
        h = g.add(h, attn_out);

        let ln2g = param(g, &mut leaves, &format!("layer{l}.ln2.g"));
        let ln2b = param(g, &mut leaves, &format!("layer{l}.ln2.b"));
        let x2 = g.layer_norm(h, ln2g, ln2b);
        let w1 = param(g, &mut leaves, &format!("layer{l}.mlp.w1"));
        let b1 = param(g, &mut leaves, &format!("layer{l}.mlp.b1"));
        let w2 = param(g, &mut leaves, &format!("layer{l}.mlp.w2"));
        let b2 = param(g, &mut leaves, &format!("layer{l}.mlp.b2"));
        let m1 = g.matmul(x2, w1);
        let m1 = g.add_bias(m1, b1);
        let m1 = g.gelu(m1);
        let m2 = g.matmul(m1, w2);
        let m2 = g.add_bias(m2, b2);
        h = g.add(h, m2);
    }

    let lnfg = param(g, &mut leaves, "ln_f.g");
    let lnfb = param(g, &mut leaves, "ln_f.b");
    let hf = g.layer_norm(h, lnfg, lnfb);
    let lw = param(g, &mut leaves, "lm_head.w");
    let lb = param(g, &mut leaves, "lm_head.b");
    let lo = g.matmul(hf, lw);
    let logits = g.add_bias(lo, lb);

    OracleForward { logits, param_leaves: leaves }
}

/// Naive KL between two logit rows (direct softmax and summation), written
/// without the library's log-space path.
pub fn naive_kl(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let pe: Vec<f64> = p_logits.iter().map(|v| v.exp()).collect();
    let qe: Vec<f64> = q_logits.iter().map(|v| v.exp()).collect();
    let ps: f64 = pe.iter().sum();
    let qs: f64 = qe.iter().sum();
    pe.iter()
        .zip(&qe)
        .map(|(&a, &b)| {
            let p = a / ps;
            if p > 0.0 {
                p * (p.ln() - (b / qs).ln())
            } else {
                0.0
            }
        })
        .sum()
}

/// Deterministic xorshift stream for test inputs, decoupled from the crate's
/// RNG choices.
pub struct TestRng(u64);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        TestRng(seed.max(1))
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.0 = x;
        x
    }

    /// Uniform in [-1.5, 1.5].
    pub fn val(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 3.0 - 1.5
    }

    pub fn vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.val()).collect()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }
}
