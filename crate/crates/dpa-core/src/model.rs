//! Model configuration and weight container for the SwiGLU decoder stack.

use serde::{Deserialize, Serialize};

use crate::error::{DpaError, Result};
use crate::tensor::Tensor;

/// Architecture hyperparameters of a decoder-only SwiGLU transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub head_dim: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    pub norm_eps: f64,
}

fn default_rope_base() -> f64 {
    10_000.0
}

impl ModelConfig {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_layers: usize,
        n_heads: usize,
        d_model: usize,
        head_dim: usize,
        d_ffn: usize,
        vocab_size: usize,
        rope_base: f64,
        norm_eps: f64,
    ) -> Result<Self> {
        let cfg = Self {
            n_layers,
            n_heads,
            d_model,
            head_dim,
            d_ffn,
            vocab_size,
            rope_base,
            norm_eps,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let all_pos = [
            self.n_layers,
            self.n_heads,
            self.d_model,
            self.head_dim,
            self.d_ffn,
            self.vocab_size,
        ]
        .iter()
        .all(|&v| v >= 1);
        if !all_pos {
            return Err(DpaError::Config("all extents must be >= 1".into()));
        }
        if self.n_heads * self.head_dim != self.d_model {
            return Err(DpaError::Config(format!(
                "n_heads * head_dim must equal d_model ({} * {} != {})",
                self.n_heads, self.head_dim, self.d_model
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(DpaError::Config(
                "head_dim must be even (rotary embedding pairs dimensions)".into(),
            ));
        }
        if !(self.norm_eps.is_finite() && self.norm_eps > 0.0) {
            return Err(DpaError::Config("norm_eps must be finite and > 0".into()));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            return Err(DpaError::Config("rope_base must be > 1".into()));
        }
        Ok(())
    }
}

/// Per-layer projection and norm weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// d×d; head h occupies columns `h*head_dim .. (h+1)*head_dim`.
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// d×d; head h occupies rows `h*head_dim .. (h+1)*head_dim`.
    pub w_o: Tensor,
    /// d×d_ffn gate projection.
    pub w_g: Tensor,
    /// d×d_ffn up projection.
    pub w_u: Tensor,
    /// d_ffn×d down projection.
    pub w_d: Tensor,
    /// RMSNorm scale before attention (length d).
    pub gamma_attn: Tensor,
    /// RMSNorm scale before the GLU (length d).
    pub gamma_mlp: Tensor,
}

/// Frozen weights of the full model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// vocab×d token embedding.
    pub embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    /// RMSNorm scale before the unembedding (length d).
    pub gamma_final: Tensor,
    /// d×vocab unembedding.
    pub unembedding: Tensor,
}

impl ModelWeights {
    /// Check that every tensor matches the shapes implied by `cfg`.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        let d = cfg.d_model;
        let check = |t: &Tensor, shape: &[usize], name: &str| -> Result<()> {
            if t.shape() != shape {
                return Err(DpaError::Shape(format!(
                    "{name}: expected {:?}, got {:?}",
                    shape,
                    t.shape()
                )));
            }
            Ok(())
        };
        check(&self.embedding, &[cfg.vocab_size, d], "embedding")?;
        check(&self.unembedding, &[d, cfg.vocab_size], "unembedding")?;
        check(&self.gamma_final, &[d], "gamma_final")?;
        if self.layers.len() != cfg.n_layers {
            return Err(DpaError::Shape(format!(
                "expected {} layers, got {}",
                cfg.n_layers,
                self.layers.len()
            )));
        }
        for (l, lw) in self.layers.iter().enumerate() {
            check(&lw.w_q, &[d, d], &format!("layers.{l}.wq"))?;
            check(&lw.w_k, &[d, d], &format!("layers.{l}.wk"))?;
            check(&lw.w_v, &[d, d], &format!("layers.{l}.wv"))?;
            check(&lw.w_o, &[d, d], &format!("layers.{l}.wo"))?;
            check(&lw.w_g, &[d, cfg.d_ffn], &format!("layers.{l}.wg"))?;
            check(&lw.w_u, &[d, cfg.d_ffn], &format!("layers.{l}.wu"))?;
            check(&lw.w_d, &[cfg.d_ffn, d], &format!("layers.{l}.wd"))?;
            check(&lw.gamma_attn, &[d], &format!("layers.{l}.attn_norm"))?;
            check(&lw.gamma_mlp, &[d], &format!("layers.{l}.mlp_norm"))?;
        }
        Ok(())
    }
}
