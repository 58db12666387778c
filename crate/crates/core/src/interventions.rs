//! Update-time structural interventions. All four leave rollout generation,
//! rewards, and advantage normalization untouched and differ only in how the
//! policy-update loss is computed:
//!
//! * update mask — the update forward runs under the answer→prompt block
//!   policy (rollouts stay full);
//! * gradient mask — forward unchanged; backward is zeroed through
//!   answer→prompt attention edges, on both the logit and the value path;
//! * CoT gradient — forward unchanged; every linear map accumulates weight
//!   gradients only from CoT rows;
//! * adversarial prompt perturbation — an FGSM-style delta on prompt hidden
//!   states, recomputing the update loss under the perturbation.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, TensorId};
use crate::model::{
    AttentionPolicy, ForwardOpts, ForwardRecord, HookDelta, InjectionHook, Model, ModelError,
};
use crate::roles::{Role, RoleSpans};
use crate::tensor::Tensor;

/// Which intervention a training run applies at update time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterventionKind {
    None,
    UpdateMask,
    GradientMask,
    CotGradient,
    Fact,
}

impl InterventionKind {
    pub const ALL: [InterventionKind; 5] = [
        InterventionKind::None,
        InterventionKind::UpdateMask,
        InterventionKind::GradientMask,
        InterventionKind::CotGradient,
        InterventionKind::Fact,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            InterventionKind::None => "none",
            InterventionKind::UpdateMask => "update-mask",
            InterventionKind::GradientMask => "gradient-mask",
            InterventionKind::CotGradient => "cot-gradient",
            InterventionKind::Fact => "fact",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionConfig {
    pub kind: InterventionKind,
    /// FGSM step size; used only when `kind == Fact`.
    #[serde(default = "default_epsilon")]
    pub fact_epsilon: f64,
    /// Injection layer; 0 is the embedding output.
    #[serde(default)]
    pub fact_layer: usize,
}

fn default_epsilon() -> f64 {
    0.05
}

impl Default for InterventionConfig {
    fn default() -> Self {
        InterventionConfig { kind: InterventionKind::None, fact_epsilon: 0.05, fact_layer: 0 }
    }
}

/// Indicator over (query `i`, key `j`) pairs with `G_ij = 1` iff `i` is an
/// answer position and `j` a prompt position. Always a subset of the causal
/// pairs; derived purely from the role spans.
#[derive(Debug, Clone)]
pub struct EdgeSet {
    pub len: usize,
    pub mask: Arc<Vec<bool>>,
}

impl EdgeSet {
    pub fn answer_to_prompt(spans: &RoleSpans, len: usize) -> Self {
        let roles = spans.roles(len);
        let mut mask = vec![false; len * len];
        for i in 0..len {
            if roles[i] != Role::Answer {
                continue;
            }
            for j in 0..len {
                if roles[j] == Role::Prompt {
                    // prompt precedes answer, so these are all causal pairs
                    debug_assert!(j <= i);
                    mask[i * len + j] = true;
                }
            }
        }
        EdgeSet { len, mask: Arc::new(mask) }
    }

    pub fn num_edges(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

/// The update-mask attention policy: block answer→prompt edges during the
/// update forward pass only. Shares the constructor the direct-effect metric
/// mask uses.
pub fn update_mask_policy(spans: &RoleSpans) -> AttentionPolicy {
    AttentionPolicy::BlockAnswerToPrompt(*spans)
}

/// `z̃ = sg(G∘z) + (1−G)∘z` on attention logits: forward value equals `z`
/// exactly; backward contributes zero on `G` edges and identity elsewhere.
pub fn gradient_masked_attention(g: &mut Graph, z: TensorId, edges: &EdgeSet) -> TensorId {
    g.edge_stopgrad(z, Arc::clone(&edges.mask))
}

/// `Y = (X∘m)W + (X∘(1−m))·sg(W) + b` for a row mask `m`: numerically
/// identical to `XW + b`, with `∂loss/∂W` accumulating only from rows where
/// `m = 1`. The bias stays outside the masked terms and receives gradient
/// from every row.
pub fn cot_gradient_linear(
    g: &mut Graph,
    x: TensorId,
    w: TensorId,
    b: TensorId,
    m: Arc<Vec<f64>>,
) -> TensorId {
    let y = g.row_masked_linear(x, w, m);
    g.add_bias(y, b)
}

/// How one trace's update-loss forward is shaped by the configured
/// intervention.
pub enum UpdatePlan {
    Vanilla,
    UpdateMask(AttentionPolicy),
    GradientMask(EdgeSet),
    CotGradient(Arc<Vec<f64>>),
    Fact { epsilon: f64, layer: usize, prompt_positions: Arc<Vec<usize>> },
}

/// Dispatch to exactly one mechanism. `kind = None` reproduces the vanilla
/// update bit-for-bit; degenerate spans (empty answer, empty prompt) fall
/// back to the vanilla plan where the mechanism would be a no-op.
pub fn plan_update(cfg: &InterventionConfig, spans: &RoleSpans, len: usize) -> UpdatePlan {
    match cfg.kind {
        InterventionKind::None => UpdatePlan::Vanilla,
        InterventionKind::UpdateMask => UpdatePlan::UpdateMask(update_mask_policy(spans)),
        InterventionKind::GradientMask => {
            UpdatePlan::GradientMask(EdgeSet::answer_to_prompt(spans, len))
        }
        InterventionKind::CotGradient => {
            let roles = spans.roles(len);
            let mask: Vec<f64> =
                roles.iter().map(|r| if *r == Role::Cot { 1.0 } else { 0.0 }).collect();
            UpdatePlan::CotGradient(Arc::new(mask))
        }
        InterventionKind::Fact => {
            let positions: Vec<usize> = spans.prompt.iter().collect();
            if positions.is_empty() {
                UpdatePlan::Vanilla
            } else {
                UpdatePlan::Fact {
                    epsilon: cfg.fact_epsilon,
                    layer: cfg.fact_layer,
                    prompt_positions: Arc::new(positions),
                }
            }
        }
    }
}

/// FGSM perturbation of prompt hidden states at layer `layer`:
/// `δ* = ε · sign(∇_δ L_inner)|_{δ=0}`, where `build_loss` constructs the
/// teacher-forced update loss on the hooked forward. Returns `None` when the
/// prompt is empty (the intervention degenerates to none).
pub fn fact_delta<F>(
    model: &Model,
    tokens: &[usize],
    prompt_positions: &Arc<Vec<usize>>,
    epsilon: f64,
    layer: usize,
    build_loss: F,
) -> Result<Option<Tensor>, ModelError>
where
    F: FnOnce(&mut Graph, &ForwardRecord) -> TensorId,
{
    if prompt_positions.is_empty() {
        return Ok(None);
    }
    let mut g = Graph::new();
    let hook = InjectionHook {
        layer,
        positions: Arc::clone(prompt_positions),
        delta: HookDelta::Trainable,
    };
    let opts = ForwardOpts { hook: Some(&hook), ..Default::default() };
    let rec = model.forward(&mut g, tokens, &opts)?;
    let loss = build_loss(&mut g, &rec);
    let delta_id = rec.hook_delta.expect("trainable hook records its delta");
    let grads = g.backward(loss)?;
    let grad = grads.wrt_or_zeros(delta_id);
    let data: Vec<f64> = grad
        .iter()
        .map(|&v| {
            if v > 0.0 {
                epsilon
            } else if v < 0.0 {
                -epsilon
            } else {
                0.0
            }
        })
        .collect();
    Ok(Some(Tensor::new(vec![prompt_positions.len(), model.cfg.d_model], data)))
}
