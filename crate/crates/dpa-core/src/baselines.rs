//! Reference attribution methods: the activation-patching oracle,
//! finite-difference gradients, attention summaries, magnitude ranks,
//! and AtP. These anchor the faithfulness comparisons and validate the
//! dual-path scores at desk scale.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::ActivationCache;
use crate::dpa::TargetSpec;
use crate::error::{DpaError, Result};
use crate::forward::{
    forward, forward_from_embeddings, forward_logits, head_contribution, neuron_contribution,
    ForwardEdits, ResidualSite,
};
use crate::model::{ModelConfig, ModelWeights};
use crate::tensor::Tensor;

/// Central-difference step for the gradient-flavored baselines.
const FD_STEP: f64 = 1e-4;

/// Addressable unit of attribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComponentKind {
    Head,
    Neuron,
    Token,
}

/// A single component: an attention head, a GLU neuron, or an input
/// token position (`index` holds the position; `layer` is zero).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ComponentRef {
    pub kind: ComponentKind,
    pub layer: usize,
    pub index: usize,
}

impl ComponentRef {
    pub fn new(kind: ComponentKind, layer: usize, index: usize) -> Self {
        Self { kind, layer, index }
    }

    pub fn head(layer: usize, index: usize) -> Self {
        Self::new(ComponentKind::Head, layer, index)
    }

    pub fn neuron(layer: usize, index: usize) -> Self {
        Self::new(ComponentKind::Neuron, layer, index)
    }

    pub fn token(position: usize) -> Self {
        Self::new(ComponentKind::Token, 0, position)
    }

    pub fn validate(&self, cfg: &ModelConfig, seq_len: usize) -> Result<()> {
        let ok = match self.kind {
            ComponentKind::Head => self.layer < cfg.n_layers && self.index < cfg.n_heads,
            ComponentKind::Neuron => self.layer < cfg.n_layers && self.index < cfg.d_ffn,
            ComponentKind::Token => self.index < seq_len,
        };
        if ok {
            Ok(())
        } else {
            Err(DpaError::Component(format!("{self:?}")))
        }
    }
}

impl std::fmt::Display for ComponentRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.kind {
            ComponentKind::Head => write!(f, "head(layer={}, head={})", self.layer, self.index),
            ComponentKind::Neuron => {
                write!(f, "neuron(layer={}, neuron={})", self.layer, self.index)
            }
            ComponentKind::Token => write!(f, "token(position={})", self.index),
        }
    }
}

/// Canonical component ordering: heads layer-major, then neurons
/// layer-major. Rankings over components align with this list.
pub fn component_candidates(cfg: &ModelConfig) -> Vec<ComponentRef> {
    let mut out = Vec::with_capacity(cfg.n_layers * (cfg.n_heads + cfg.d_ffn));
    for l in 0..cfg.n_layers {
        for h in 0..cfg.n_heads {
            out.push(ComponentRef::head(l, h));
        }
    }
    for l in 0..cfg.n_layers {
        for n in 0..cfg.d_ffn {
            out.push(ComponentRef::neuron(l, n));
        }
    }
    out
}

/// The enumerated baseline methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMethod {
    ActivationPatching,
    InputXGradient,
    AttnLast,
    AttnMean,
    Rollout,
    AttnOnly,
    MlpOnly,
    NormOnly,
    Atp,
    Random,
}

impl std::str::FromStr for BaselineMethod {
    type Err = DpaError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "activation-patching" => Self::ActivationPatching,
            "input-x-gradient" => Self::InputXGradient,
            "attn-last" => Self::AttnLast,
            "attn-mean" => Self::AttnMean,
            "rollout" => Self::Rollout,
            "attn-only" => Self::AttnOnly,
            "mlp-only" => Self::MlpOnly,
            "norm-only" => Self::NormOnly,
            "atp" => Self::Atp,
            "random" => Self::Random,
            other => {
                return Err(DpaError::InvalidArgument(format!(
                    "unknown baseline method '{other}'"
                )))
            }
        })
    }
}

fn edits_for(component: &ComponentRef) -> ForwardEdits {
    let mut edits = ForwardEdits::none();
    match component.kind {
        ComponentKind::Head => edits.zero_heads.push((component.layer, component.index)),
        ComponentKind::Neuron => edits.zero_neurons.push((component.layer, component.index)),
        ComponentKind::Token => edits.zero_embeddings.push(component.index),
    }
    edits
}

/// Zero-ablation activation patching: the clean target logit minus the
/// logit with the component's residual write removed. One extra forward
/// pass per call; this is the causal ground-truth oracle.
pub fn activation_patch(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    tokens: &[usize],
    component: &ComponentRef,
    spec: &TargetSpec,
) -> Result<f64> {
    component.validate(cfg, tokens.len())?;
    let clean = forward_logits(tokens, weights, cfg, &ForwardEdits::none())?;
    let patched = forward_logits(tokens, weights, cfg, &edits_for(component))?;
    Ok(clean.get2(spec.position, spec.token) - patched.get2(spec.position, spec.token))
}

/// Input-times-gradient token scores: central finite differences of the
/// target logit with respect to each embedding coordinate, dotted with
/// the embedding row. Costs 2*T*d forward passes.
pub fn input_x_gradient(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    tokens: &[usize],
    spec: &TargetSpec,
) -> Result<Vec<f64>> {
    let out = forward(tokens, weights, cfg)?;
    let x0 = out.cache.embeddings;
    let mut scores = vec![0.0; tokens.len()];
    let edits = ForwardEdits::none();
    for i in 0..tokens.len() {
        let mut acc = 0.0;
        for c in 0..cfg.d_model {
            let base = x0.get2(i, c);
            if base == 0.0 {
                continue;
            }
            let mut plus = x0.clone();
            plus.set2(i, c, base + FD_STEP);
            let mut minus = x0.clone();
            minus.set2(i, c, base - FD_STEP);
            let f_plus = forward_from_embeddings(&plus, weights, cfg, &edits)?
                .get2(spec.position, spec.token);
            let f_minus = forward_from_embeddings(&minus, weights, cfg, &edits)?
                .get2(spec.position, spec.token);
            let grad = (f_plus - f_minus) / (2.0 * FD_STEP);
            acc += grad * base;
        }
        scores[i] = acc;
    }
    Ok(scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionVariant {
    Last,
    Mean,
}

/// Attention paid by the attribution position to each source position,
/// averaged over heads at the last layer (`Last`) or over all layers
/// (`Mean`).
pub fn attention_scores(
    cache: &ActivationCache,
    variant: AttentionVariant,
    position: usize,
) -> Vec<f64> {
    let t = cache.seq_len();
    let layers: &[crate::cache::LayerCache] = match variant {
        AttentionVariant::Last => std::slice::from_ref(cache.layers.last().expect("L >= 1")),
        AttentionVariant::Mean => &cache.layers,
    };
    let mut scores = vec![0.0; t];
    let mut count = 0.0;
    for lc in layers {
        for hc in &lc.heads {
            for (s, j) in scores.iter_mut().zip(0..t) {
                *s += hc.attn.get2(position, j);
            }
            count += 1.0;
        }
    }
    for s in &mut scores {
        *s /= count;
    }
    scores
}

/// Attention rollout: per layer, mix the head-averaged attention with the
/// identity (residual carry), renormalize rows, and accumulate the
/// product across layers. Read at the attribution position.
pub fn rollout(cache: &ActivationCache, position: usize) -> Vec<f64> {
    let t = cache.seq_len();
    // accumulated rollout starts as the identity
    let mut acc = Tensor::zeros2(t, t);
    for i in 0..t {
        acc.set2(i, i, 1.0);
    }
    for lc in &cache.layers {
        let heads = lc.heads.len() as f64;
        let mut mixed = Tensor::zeros2(t, t);
        for i in 0..t {
            for j in 0..t {
                let mut a = 0.0;
                for hc in &lc.heads {
                    a += hc.attn.get2(i, j);
                }
                let mut v = 0.5 * a / heads;
                if i == j {
                    v += 0.5;
                }
                mixed.set2(i, j, v);
            }
            let sum: f64 = mixed.row(i).iter().sum();
            for v in mixed.row_mut(i) {
                *v /= sum;
            }
        }
        acc = mixed.matmul(&acc);
    }
    acc.row(position).to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MagnitudeVariant {
    AttnOnly,
    MlpOnly,
    NormOnly,
}

/// Activation-magnitude ranks over the canonical component list.
///
/// attn-only: mean head-output row norm (neurons score zero);
/// mlp-only: mean |gate activation * up value| (heads score zero);
/// norm-only: L2 norm of the component's residual writes summed over
/// positions, for heads and neurons alike.
pub fn magnitude_scores(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    cache: &ActivationCache,
    variant: MagnitudeVariant,
) -> Result<Vec<f64>> {
    let t = cache.seq_len() as f64;
    let mut scores = Vec::new();
    for component in component_candidates(cfg) {
        let score = match (component.kind, variant) {
            (ComponentKind::Head, MagnitudeVariant::MlpOnly)
            | (ComponentKind::Neuron, MagnitudeVariant::AttnOnly) => 0.0,
            (ComponentKind::Head, MagnitudeVariant::AttnOnly) => {
                let contrib = head_contribution(cache, weights, component.layer, component.index)?;
                (0..contrib.rows())
                    .map(|i| contrib.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
                    .sum::<f64>()
                    / t
            }
            (ComponentKind::Neuron, MagnitudeVariant::MlpOnly) => {
                let glu = &cache.layers[component.layer].glu;
                (0..glu.gate_act.rows())
                    .map(|i| {
                        (glu.gate_act.get2(i, component.index) * glu.up.get2(i, component.index))
                            .abs()
                    })
                    .sum::<f64>()
                    / t
            }
            (_, MagnitudeVariant::NormOnly) => {
                let contrib = match component.kind {
                    ComponentKind::Head => {
                        head_contribution(cache, weights, component.layer, component.index)?
                    }
                    _ => neuron_contribution(cache, weights, component.layer, component.index)?,
                };
                (0..contrib.rows())
                    .map(|i| contrib.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
                    .sum::<f64>()
            }
            (ComponentKind::Token, _) => {
                return Err(DpaError::InvalidArgument(
                    "magnitude scores are component-level".into(),
                ))
            }
        };
        scores.push(score);
    }
    Ok(scores)
}

/// AtP: the component contribution dotted with a finite-difference
/// estimate of the target-logit gradient at the component's residual
/// site. The gradient is taken directionally along the contribution
/// (two forwards per component).
pub fn atp_scores(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    tokens: &[usize],
    spec: &TargetSpec,
) -> Result<Vec<f64>> {
    let out = forward(tokens, weights, cfg)?;
    let mut scores = Vec::new();
    for component in component_candidates(cfg) {
        let (contrib, site) = match component.kind {
            ComponentKind::Head => (
                head_contribution(&out.cache, weights, component.layer, component.index)?,
                ResidualSite::AfterAttn(component.layer),
            ),
            ComponentKind::Neuron => (
                neuron_contribution(&out.cache, weights, component.layer, component.index)?,
                ResidualSite::AfterGlu(component.layer),
            ),
            ComponentKind::Token => unreachable!("candidates are heads and neurons"),
        };
        let norm = contrib.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            scores.push(0.0);
            continue;
        }
        let dir = contrib.scale(1.0 / norm);
        let mut plus = ForwardEdits::none();
        plus.site_deltas.push((site, dir.scale(FD_STEP)));
        let mut minus = ForwardEdits::none();
        minus.site_deltas.push((site, dir.scale(-FD_STEP)));
        let f_plus =
            forward_logits(tokens, weights, cfg, &plus)?.get2(spec.position, spec.token);
        let f_minus =
            forward_logits(tokens, weights, cfg, &minus)?.get2(spec.position, spec.token);
        scores.push(norm * (f_plus - f_minus) / (2.0 * FD_STEP));
    }
    Ok(scores)
}

/// Reference random ranking, deterministic per seed.
pub fn random_scores(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen::<f64>()).collect()
}
