//! Desk-scale workbench for dual-path attribution on SwiGLU decoder
//! transformers.
//!
//! The crate provides, in one forward and one backward pass:
//!
//! - [`forward`]: the decoder forward pass with the full activation cache
//!   needed by the backward target propagation, plus edited variants for
//!   causal interventions;
//! - [`dpa`]: recursive top-down propagation of a target unembedding
//!   direction through the frozen network, and token/head/neuron scores;
//! - [`baselines`]: activation patching (the causal oracle),
//!   finite-difference gradients, attention summaries, magnitude ranks,
//!   and AtP;
//! - [`faithfulness`]: disruption/recovery curves with AUC aggregation;
//! - [`zoo`]: seeded random models, planted circuits with documented
//!   ground truth, and the DPAW weight container.

pub mod baselines;
pub mod cache;
pub mod dpa;
pub mod error;
pub mod faithfulness;
pub mod forward;
pub mod model;
pub mod stats;
pub mod tensor;
pub mod zoo;

pub use cache::{ActivationCache, ForwardOutput};
pub use dpa::{AttributionScores, EffectiveTargets, PathWeights, SensitivityKind, TargetSpec};
pub use error::{DpaError, Result};
pub use model::{LayerWeights, ModelConfig, ModelWeights};
pub use tensor::Tensor;
