//! Desk-scale laboratory for measuring and steering where a small reasoning
//! model routes answer-relevant information: through its chain-of-thought or
//! directly from the prompt.
//!
//! The pieces, bottom-up:
//! * [`tensor`] / [`graph`] — f64 tensors and reverse-mode autodiff with the
//!   gradient-shaping primitives (stop-gradient, sign, edge-masked softmax,
//!   edge/row gradient masking) the interventions need.
//! * [`vocab`] / [`roles`] — toy tokenizer and pure-token segmentation of a
//!   trace into prompt / CoT / answer spans.
//! * [`model`] — small decoder-only transformer with pluggable
//!   attention-edge policies and a hidden-state injection hook.
//! * [`metrics`] — sufficiency entropy, masked-KL direct-effect/necessity,
//!   gradient-mass fractions, hint-perturbation causal score, entropy-binned
//!   KL diagnostic, Mann–Whitney U.
//! * [`interventions`] — the four update-time structural interventions
//!   (update mask, gradient mask, CoT gradient, adversarial prompt
//!   perturbation), all leaving rollouts untouched.
//! * [`trainer`] — on-policy grouped-rollout REINFORCE with verifiable
//!   rewards and group-normalized advantages.
//! * [`task`] — hinted-arithmetic generator, verifier, and behavioral
//!   probes.

pub mod checkpoint;
pub mod graph;
pub mod interventions;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod roles;
pub mod stats;
pub mod task;
pub mod tensor;
pub mod trainer;
pub mod vocab;
