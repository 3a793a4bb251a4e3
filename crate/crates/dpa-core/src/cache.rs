//! Activation cache captured during the forward pass.
//!
//! Everything the backward target propagation needs is retained here:
//! normalized inputs with their RMS denominators, per-head attention
//! weights, rotated queries/keys, values and head means, GLU
//! pre-activations and gate activations, and residual snapshots.

use crate::tensor::Tensor;

/// Per-head attention state for one layer.
#[derive(Debug, Clone)]
pub struct HeadCache {
    /// T×T attention weights, lower-triangular (causal).
    pub attn: Tensor,
    /// T×head_dim rotated queries.
    pub q_rot: Tensor,
    /// T×head_dim rotated keys.
    pub k_rot: Tensor,
    /// T×head_dim value vectors v_j.
    pub values: Tensor,
    /// T×head_dim attention-weighted value means per query position.
    pub means: Tensor,
}

/// GLU activations for one layer.
#[derive(Debug, Clone)]
pub struct GluCache {
    /// T×d_ffn gate pre-activations.
    pub pre_act: Tensor,
    /// T×d_ffn gate activations (SiLU of the pre-activations).
    pub gate_act: Tensor,
    /// T×d_ffn up-projection values.
    pub up: Tensor,
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    /// T×d normalized input to attention (scale already applied).
    pub x_norm_attn: Tensor,
    /// RMS denominators at the attention norm, per position.
    pub sigma_attn: Vec<f64>,
    pub heads: Vec<HeadCache>,
    /// Residual snapshot after the attention write.
    pub x_mid: Tensor,
    /// T×d normalized input to the GLU.
    pub x_norm_mlp: Tensor,
    pub sigma_mlp: Vec<f64>,
    pub glu: GluCache,
    /// Residual snapshot after the GLU write.
    pub x_out: Tensor,
}

#[derive(Debug, Clone)]
pub struct ActivationCache {
    /// T×d embedding rows, the initial residual state.
    pub embeddings: Tensor,
    pub layers: Vec<LayerCache>,
    /// RMS denominators at the final norm, per position.
    pub sigma_final: Vec<f64>,
}

impl ActivationCache {
    pub fn seq_len(&self) -> usize {
        self.embeddings.rows()
    }
}

/// Forward-pass result: logits plus the full cache.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// T×vocab logits.
    pub logits: Tensor,
    pub cache: ActivationCache,
}
