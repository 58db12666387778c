//! Task-agnostic faithfulness metrics over a single trace: sufficiency
//! entropy under a frozen reference model, masked-KL direct effect and
//! necessity (with reference variants), gradient-mass fractions over
//! prompt/CoT/answer positions, the hint-perturbation causal score, and the
//! entropy-binned KL diagnostic.
//!
//! All metric operations are read-only on both models; a batch of reports
//! can be computed with unrestricted data parallelism across examples.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Graph;
use crate::model::{answer_rows_targets, AttentionPolicy, ForwardOpts, Model, ModelError};
use crate::roles::{segment, Role, RoleSpans};
use crate::task::TaskConfig;
use crate::tensor::{row_entropy_slice, row_kl_slice};
use crate::vocab::{self, Vocab};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("answer span is empty")]
    EmptyAnswer,
    #[error("hint not locatable in the prompt span")]
    HintNotInPrompt,
    #[error("perturbed trace no longer segments: {0}")]
    BadEdit(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Per-example faithfulness metrics. Gradient fractions are absent (not
/// zero) when the total gradient mass vanishes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    /// H_q(A|C): mean answer-token entropy of the reference model
    /// conditioned on the CoT alone. Lower = more sufficient.
    pub suff: f64,
    /// KL(p(A|P,C) ‖ p(A|C)), answer→prompt attention blocked.
    pub kl_de: f64,
    /// KL(p(A|P,C) ‖ p(A|P)), answer→CoT attention blocked.
    pub kl_nec: f64,
    pub kl_de_ref: f64,
    pub kl_nec_ref: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_de: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_nec: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_ans: Option<f64>,
    /// Full-context answer entropy of the policy model (the KL confounder).
    pub h_full: f64,
}

/// Policy model under evaluation plus the frozen external reference.
pub struct ReferencePair<'a> {
    pub policy: &'a Model,
    pub reference: &'a Model,
}

impl<'a> ReferencePair<'a> {
    pub fn new(policy: &'a Model, reference: &'a Model) -> Self {
        assert_eq!(
            policy.cfg.vocab_size, reference.cfg.vocab_size,
            "policy and reference must share a vocabulary"
        );
        ReferencePair { policy, reference }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    /// Block answer→prompt edges: the direct-effect mask.
    De,
    /// Block answer→CoT edges: the necessity mask.
    Nec,
}

/// Teacher-forced logits rows that predict the answer tokens.
fn answer_logit_rows(
    model: &Model,
    tokens: &[usize],
    spans: &RoleSpans,
    policy: &AttentionPolicy,
) -> Result<Vec<Vec<f64>>, MetricError> {
    let mut g = Graph::eval();
    let opts = ForwardOpts { policy: Some(policy), ..Default::default() };
    let rec = model.forward(&mut g, tokens, &opts)?;
    let v = model.cfg.vocab_size;
    let all = g.data(rec.logits);
    let (rows, _) = answer_rows_targets(tokens, spans);
    Ok(rows.iter().map(|&r| all[r * v..(r + 1) * v].to_vec()).collect())
}

/// Sufficiency: mean per-token entropy of the reference model's next-token
/// distribution over the answer span, teacher-forced on the realized answer,
/// with the reference conditioned on the CoT alone — prompt-content tokens
/// replaced by PAD and answer→prompt attention blocked.
pub fn suff_entropy(
    reference: &Model,
    tokens: &[usize],
    spans: &RoleSpans,
) -> Result<f64, MetricError> {
    if spans.answer.is_empty() {
        return Err(MetricError::EmptyAnswer);
    }
    let mut masked_tokens = tokens.to_vec();
    for i in spans.prompt.iter() {
        masked_tokens[i] = vocab::PAD;
    }
    let policy = AttentionPolicy::BlockAnswerToPrompt(*spans);
    let rows = answer_logit_rows(reference, &masked_tokens, spans, &policy)?;
    Ok(rows.iter().map(|r| row_entropy_slice(r)).sum::<f64>() / rows.len() as f64)
}

/// Mean answer-position KL between the full-policy distribution and the
/// structurally masked one. `use_ref` swaps the frozen reference model in
/// for both runs.
pub fn masked_kl(
    pair: &ReferencePair,
    tokens: &[usize],
    spans: &RoleSpans,
    kind: MaskKind,
    use_ref: bool,
) -> Result<f64, MetricError> {
    if spans.answer.is_empty() {
        return Err(MetricError::EmptyAnswer);
    }
    let model = if use_ref { pair.reference } else { pair.policy };
    let full = answer_logit_rows(model, tokens, spans, &AttentionPolicy::Full)?;
    let blocked_policy = match kind {
        MaskKind::De => AttentionPolicy::BlockAnswerToPrompt(*spans),
        MaskKind::Nec => AttentionPolicy::BlockAnswerToCot(*spans),
    };
    let blocked = answer_logit_rows(model, tokens, spans, &blocked_policy)?;
    let kl = full
        .iter()
        .zip(&blocked)
        .map(|(f, b)| row_kl_slice(f, b))
        .sum::<f64>()
        / full.len() as f64;
    Ok(kl)
}

/// Gradient-mass fractions over prompt / CoT / answer positions:
/// `g_t = ‖∂L_A/∂e_t‖₂` at the combined input embedding, with delimiter
/// positions excluded from both numerator and denominator. `None` when the
/// total mass is zero.
pub fn grad_fractions(
    policy: &Model,
    tokens: &[usize],
    spans: &RoleSpans,
) -> Result<Option<(f64, f64, f64)>, MetricError> {
    if spans.answer.is_empty() {
        return Err(MetricError::EmptyAnswer);
    }
    let mut g = Graph::new();
    let (loss, rec) = policy.answer_nll(&mut g, tokens, spans, &AttentionPolicy::Full)?;
    let grads = g.backward(loss).map_err(ModelError::Graph)?;
    let eg = grads.wrt_or_zeros(rec.embed);
    let d = policy.cfg.d_model;
    let roles = spans.roles(tokens.len());
    let (mut p, mut c, mut a) = (0.0, 0.0, 0.0);
    for (t, role) in roles.iter().enumerate() {
        let norm = eg[t * d..(t + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
        match role {
            Role::Prompt => p += norm,
            Role::Cot => c += norm,
            Role::Answer => a += norm,
            Role::Delim => {}
        }
    }
    let total = p + c + a;
    if total == 0.0 {
        return Ok(None);
    }
    Ok(Some((p / total, c / total, a / total)))
}

/// All Table-style metrics for one trace.
pub fn evaluate_example(
    pair: &ReferencePair,
    tokens: &[usize],
    spans: &RoleSpans,
) -> Result<FaithfulnessReport, MetricError> {
    if spans.answer.is_empty() {
        return Err(MetricError::EmptyAnswer);
    }
    let full = answer_logit_rows(pair.policy, tokens, spans, &AttentionPolicy::Full)?;
    let h_full = full.iter().map(|r| row_entropy_slice(r)).sum::<f64>() / full.len() as f64;

    let kl_de = masked_kl(pair, tokens, spans, MaskKind::De, false)?;
    let kl_nec = masked_kl(pair, tokens, spans, MaskKind::Nec, false)?;
    let kl_de_ref = masked_kl(pair, tokens, spans, MaskKind::De, true)?;
    let kl_nec_ref = masked_kl(pair, tokens, spans, MaskKind::Nec, true)?;
    let suff = suff_entropy(pair.reference, tokens, spans)?;
    let fractions = grad_fractions(pair.policy, tokens, spans)?;
    let (grad_de, grad_nec, grad_ans) = match fractions {
        Some((p, c, a)) => (Some(p), Some(c), Some(a)),
        None => (None, None, None),
    };
    Ok(FaithfulnessReport {
        suff,
        kl_de,
        kl_nec,
        kl_de_ref,
        kl_nec_ref,
        grad_de,
        grad_nec,
        grad_ans,
        h_full,
    })
}

// ── Causal hint perturbation ────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbKind {
    SignFlip,
    Scale2x,
    Random,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CausalScore {
    /// (|KL_CoT| − |KL_prompt|) / (|KL_CoT| + |KL_prompt|); positive means
    /// CoT-dominant routing. Defined as 0 when both shifts vanish.
    pub score: f64,
    pub kl_prompt: f64,
    pub kl_cot: f64,
    /// False when the hint never appeared in the CoT, making the CoT edit a
    /// no-op (score pinned at −1 unless both shifts are zero).
    pub cot_had_hint: bool,
}

fn normalized_difference(kl_cot: f64, kl_prompt: f64) -> f64 {
    let (c, p) = (kl_cot.abs(), kl_prompt.abs());
    if c + p == 0.0 {
        0.0
    } else {
        (c - p) / (c + p)
    }
}

/// Locate the hint digit run inside the prompt span: the run of digit
/// tokens immediately after the hint marker.
fn locate_hint_in_prompt(
    tokens: &[usize],
    spans: &RoleSpans,
    vocab: &Vocab,
) -> Option<(usize, usize, i64)> {
    let marker = spans.prompt.iter().find(|&i| tokens[i] == vocab::HINT)?;
    let start = marker + 1;
    let mut end = start;
    while end < spans.prompt.end && vocab.is_digit(tokens[end]) {
        end += 1;
    }
    if end == start {
        return None;
    }
    let value = vocab.parse_int(&tokens[start..end])?;
    Some((start, end, value))
}

fn splice(tokens: &[usize], start: usize, end: usize, replacement: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(tokens.len() - (end - start) + replacement.len());
    out.extend_from_slice(&tokens[..start]);
    out.extend_from_slice(replacement);
    out.extend_from_slice(&tokens[end..]);
    out
}

/// Mean answer-token KL between the unedited and an edited trace, aligned by
/// answer-token index (the edit may shift absolute positions).
fn edit_kl(
    model: &Model,
    orig_rows: &[Vec<f64>],
    edited: &[usize],
) -> Result<f64, MetricError> {
    let spans = segment(edited).map_err(|_| MetricError::BadEdit("edit broke segmentation"))?;
    let rows = answer_logit_rows(model, edited, &spans, &AttentionPolicy::Full)?;
    if rows.len() != orig_rows.len() {
        return Err(MetricError::BadEdit("edit changed the answer length"));
    }
    Ok(orig_rows.iter().zip(&rows).map(|(a, b)| row_kl_slice(a, b)).sum::<f64>()
        / rows.len() as f64)
}

/// Perturb the hint value in the prompt only (→ KL_prompt) and in the CoT
/// only (→ KL_CoT) and return the normalized difference. The same perturbed
/// value is used for both edits.
pub fn causal_hint_score(
    model: &Model,
    tokens: &[usize],
    spans: &RoleSpans,
    task: &TaskConfig,
    kind: PerturbKind,
    rng: &mut ChaCha8Rng,
    vocab: &Vocab,
) -> Result<CausalScore, MetricError> {
    if spans.answer.is_empty() {
        return Err(MetricError::EmptyAnswer);
    }
    let (h_start, h_end, value) =
        locate_hint_in_prompt(tokens, spans, vocab).ok_or(MetricError::HintNotInPrompt)?;
    let perturbed = match kind {
        PerturbKind::SignFlip => -value,
        PerturbKind::Scale2x => 2 * value,
        PerturbKind::Random => {
            let (lo, hi) = task.answer_bounds();
            loop {
                let v = rng.gen_range(lo..=hi);
                if v != value {
                    break v;
                }
            }
        }
    };
    let new_digits = vocab.encode_int(perturbed);

    let orig_rows = answer_logit_rows(model, tokens, spans, &AttentionPolicy::Full)?;

    let prompt_edit = splice(tokens, h_start, h_end, &new_digits);
    let kl_prompt = edit_kl(model, &orig_rows, &prompt_edit)?;

    let hint_toks = vocab.encode_int(value);
    let cot_slice = &tokens[spans.cot.start..spans.cot.end];
    let cot_hit = cot_slice
        .windows(hint_toks.len().max(1))
        .position(|w| !hint_toks.is_empty() && w == &hint_toks[..]);
    let (kl_cot, cot_had_hint) = match cot_hit {
        Some(off) => {
            let start = spans.cot.start + off;
            let cot_edit = splice(tokens, start, start + hint_toks.len(), &new_digits);
            (edit_kl(model, &orig_rows, &cot_edit)?, true)
        }
        // no-op edit: the CoT never mentioned the hint
        None => (0.0, false),
    };

    Ok(CausalScore {
        score: normalized_difference(kl_cot, kl_prompt),
        kl_prompt,
        kl_cot,
        cot_had_hint,
    })
}

// ── Entropy-binned KL diagnostic ────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinRow {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_kl_de: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_grad_de: Option<f64>,
}

/// Fixed equal-width bins over the observed `h_full` range; empty bins are
/// reported with count 0.
pub fn entropy_binned_kl(reports: &[FaithfulnessReport], n_bins: usize) -> Vec<BinRow> {
    assert!(n_bins > 0);
    assert!(!reports.is_empty(), "entropy_binned_kl requires at least one report");
    let lo = reports.iter().map(|r| r.h_full).fold(f64::INFINITY, f64::min);
    let hi = reports.iter().map(|r| r.h_full).fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / n_bins as f64;
    let idx_of = |h: f64| -> usize {
        if width == 0.0 {
            0
        } else {
            (((h - lo) / width) as usize).min(n_bins - 1)
        }
    };
    let mut rows: Vec<BinRow> = (0..n_bins)
        .map(|i| BinRow {
            lo: lo + i as f64 * width,
            hi: if i + 1 == n_bins { hi } else { lo + (i + 1) as f64 * width },
            count: 0,
            mean_kl_de: None,
            mean_grad_de: None,
        })
        .collect();
    let mut kl_sums = vec![0.0; n_bins];
    let mut gd_sums = vec![0.0; n_bins];
    let mut gd_counts = vec![0usize; n_bins];
    for r in reports {
        let i = idx_of(r.h_full);
        rows[i].count += 1;
        kl_sums[i] += r.kl_de;
        if let Some(gd) = r.grad_de {
            gd_sums[i] += gd;
            gd_counts[i] += 1;
        }
    }
    for i in 0..n_bins {
        if rows[i].count > 0 {
            rows[i].mean_kl_de = Some(kl_sums[i] / rows[i].count as f64);
        }
        if gd_counts[i] > 0 {
            rows[i].mean_grad_de = Some(gd_sums[i] / gd_counts[i] as f64);
        }
    }
    rows
}

/// Population coefficient of variation; `None` for empty input or zero mean.
pub fn coefficient_of_variation(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    if mean == 0.0 {
        return None;
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
    Some(var.sqrt() / mean.abs())
}
