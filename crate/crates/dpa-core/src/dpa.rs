//! Dual-path target propagation and attribution scoring.
//!
//! Stage 2 walks the target direction top-down through the frozen
//! network: per layer, first back through the GLU (up and gate paths),
//! then through every attention head (value, query, and key paths), each
//! path weighted by the mu coefficients. Stage 3 reduces scores to dot
//! products between cached component contributions and the effective
//! target at the site each component writes to.

use crate::cache::ActivationCache;
use crate::error::{DpaError, Result};
use crate::forward::{logistic, rope_rotate_inverse};
use crate::model::{ModelConfig, ModelWeights};
use crate::tensor::{dot, Tensor};

/// Convex weights balancing the control and content pathways.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathWeights {
    pub mu_q: f64,
    pub mu_k: f64,
    pub mu_v: f64,
    pub mu_gate: f64,
    pub mu_up: f64,
}

impl PathWeights {
    pub fn new(mu_q: f64, mu_k: f64, mu_v: f64, mu_gate: f64, mu_up: f64) -> Result<Self> {
        let pw = Self {
            mu_q,
            mu_k,
            mu_v,
            mu_gate,
            mu_up,
        };
        pw.validate()?;
        Ok(pw)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.mu_q, self.mu_k, self.mu_v, self.mu_gate, self.mu_up];
        if vals.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DpaError::PathWeights(
                "every mu must lie in [0, 1]".into(),
            ));
        }
        if (self.mu_q + self.mu_k + self.mu_v - 1.0).abs() > 1e-12 {
            return Err(DpaError::PathWeights(format!(
                "mu_q + mu_k + mu_v must equal 1, got {}",
                self.mu_q + self.mu_k + self.mu_v
            )));
        }
        if (self.mu_gate + self.mu_up - 1.0).abs() > 1e-12 {
            return Err(DpaError::PathWeights(format!(
                "mu_gate + mu_up must equal 1, got {}",
                self.mu_gate + self.mu_up
            )));
        }
        Ok(())
    }
}

/// Sensitivity-analysis families for the mu configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensitivityKind {
    ControlContent,
    Attention,
    QueryKey,
    Mlp,
}

impl std::str::FromStr for SensitivityKind {
    type Err = DpaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "control-content" => Ok(Self::ControlContent),
            "attention" => Ok(Self::Attention),
            "query-key" => Ok(Self::QueryKey),
            "mlp" => Ok(Self::Mlp),
            other => Err(DpaError::InvalidArgument(format!(
                "unknown sensitivity kind '{other}' (expected control-content, attention, query-key, or mlp)"
            ))),
        }
    }
}

/// Path weights for a sensitivity configuration at parameter `p`.
pub fn sensitivity_config(kind: SensitivityKind, p: f64) -> Result<PathWeights> {
    if !(0.0..=1.0).contains(&p) {
        return Err(DpaError::InvalidArgument(format!(
            "sensitivity parameter p must lie in [0, 1], got {p}"
        )));
    }
    let pw = match kind {
        SensitivityKind::ControlContent => PathWeights {
            mu_q: (1.0 - p) / 2.0,
            mu_k: (1.0 - p) / 2.0,
            mu_v: p,
            mu_gate: 1.0 - p,
            mu_up: p,
        },
        SensitivityKind::Attention => PathWeights {
            mu_q: (1.0 - p) / 2.0,
            mu_k: (1.0 - p) / 2.0,
            mu_v: p,
            mu_gate: 0.5,
            mu_up: 0.5,
        },
        SensitivityKind::QueryKey => PathWeights {
            mu_q: p / 2.0,
            mu_k: (1.0 - p) / 2.0,
            mu_v: 0.5,
            mu_gate: 0.5,
            mu_up: 0.5,
        },
        SensitivityKind::Mlp => PathWeights {
            mu_q: 0.25,
            mu_k: 0.25,
            mu_v: 0.5,
            mu_gate: 1.0 - p,
            mu_up: p,
        },
    };
    pw.validate()?;
    Ok(pw)
}

/// What to attribute: the logit of `token` at sequence position `position`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TargetSpec {
    pub token: usize,
    pub position: usize,
}

/// Per-site effective targets produced by the top-down propagation.
///
/// `after[l]` is the T×d target dotted against the residual state after
/// layer `l` completes (`after[0]` is the token-level target, `after[L]`
/// the initialized top target); `mid[l]` targets the state between layer
/// `l`'s attention and GLU writes.
#[derive(Debug, Clone)]
pub struct EffectiveTargets {
    pub spec: TargetSpec,
    pub after: Vec<Tensor>,
    pub mid: Vec<Tensor>,
}

impl EffectiveTargets {
    pub fn top(&self) -> &Tensor {
        self.after.last().expect("at least the top target")
    }

    pub fn token_level(&self) -> &Tensor {
        &self.after[0]
    }
}

/// Attribution scores for every component, plus the settings that
/// produced them.
#[derive(Debug, Clone)]
pub struct AttributionScores {
    pub token_scores: Vec<f64>,
    /// L×H head scores.
    pub head_scores: Tensor,
    /// L×d_ffn neuron scores.
    pub neuron_scores: Tensor,
    pub path_weights: PathWeights,
    pub spec: TargetSpec,
}

/// Initialize the top-level target: zero everywhere except the
/// attribution position, whose row is the target token's unembedding
/// column with the final RMSNorm folded in through the cached
/// denominator. Dotting the final residual state with this row
/// reproduces the logit exactly.
pub fn init_target(
    spec: TargetSpec,
    weights: &ModelWeights,
    cfg: &ModelConfig,
    cache: &ActivationCache,
) -> Result<Tensor> {
    let t = cache.seq_len();
    if spec.position >= t {
        return Err(DpaError::PositionOutOfRange {
            pos: spec.position,
            len: t,
        });
    }
    if spec.token >= cfg.vocab_size {
        return Err(DpaError::TokenOutOfRange {
            id: spec.token,
            vocab: cfg.vocab_size,
        });
    }
    let sigma = cache.sigma_final[spec.position];
    let mut target = Tensor::zeros2(t, cfg.d_model);
    let row = target.row_mut(spec.position);
    for (c, r) in row.iter_mut().enumerate() {
        *r = weights.gamma_final.data()[c] / sigma * weights.unembedding.get2(c, spec.token);
    }
    Ok(target)
}

fn fold_norm(out: &mut [f64], raw: &[f64], gamma: &[f64], sigma: f64) {
    for ((o, &r), &g) in out.iter_mut().zip(raw).zip(gamma) {
        *o += r * g / sigma;
    }
}

/// Up-projection path for a single neuron at one position:
/// effective up weight times the frozen gate activation times the
/// gradient scalar `w_d . t`.
pub fn propagate_glu_up(
    weights: &ModelWeights,
    cache: &ActivationCache,
    layer: usize,
    neuron: usize,
    pos: usize,
    t: &[f64],
) -> Vec<f64> {
    let lw = &weights.layers[layer];
    let lc = &cache.layers[layer];
    let lambda = dot(lw.w_d.row(neuron), t);
    let coef = lc.glu.gate_act.get2(pos, neuron) * lambda;
    let sigma = lc.sigma_mlp[pos];
    let gamma = lw.gamma_mlp.data();
    (0..t.len())
        .map(|c| lw.w_u.get2(c, neuron) * gamma[c] / sigma * coef)
        .collect()
}

/// Gate-projection path for a single neuron at one position. The local
/// gradient ratio SiLU(s)/s is computed as logistic(s), which is the
/// same function without the 0/0 at s = 0.
pub fn propagate_glu_gate(
    weights: &ModelWeights,
    cache: &ActivationCache,
    layer: usize,
    neuron: usize,
    pos: usize,
    t: &[f64],
) -> Vec<f64> {
    let lw = &weights.layers[layer];
    let lc = &cache.layers[layer];
    let lambda = dot(lw.w_d.row(neuron), t);
    let ratio = logistic(lc.glu.pre_act.get2(pos, neuron));
    let coef = ratio * lc.glu.up.get2(pos, neuron) * lambda;
    let sigma = lc.sigma_mlp[pos];
    let gamma = lw.gamma_mlp.data();
    (0..t.len())
        .map(|c| lw.w_g.get2(c, neuron) * gamma[c] / sigma * coef)
        .collect()
}

/// Project the per-position targets into a head's output space:
/// `lambda_i = W_O^(h) t_i`, a T×head_dim matrix.
pub fn project_head_targets(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    layer: usize,
    head: usize,
    t_mid: &Tensor,
) -> Tensor {
    let lw = &weights.layers[layer];
    let dh = cfg.head_dim;
    let row0 = head * dh;
    let t = t_mid.rows();
    let mut lambda = Tensor::zeros2(t, dh);
    for i in 0..t {
        let t_row = t_mid.row(i);
        if t_row.iter().all(|&v| v == 0.0) {
            continue;
        }
        let l_row = lambda.row_mut(i);
        for (a, l) in l_row.iter_mut().enumerate() {
            *l = dot(lw.w_o.row(row0 + a), t_row);
        }
    }
    lambda
}

/// Softmax sensitivity of the frozen-value head score with respect to
/// the attention logits: `delta_ij = alpha_ij (v_j - mu_i) . lambda_i`.
pub fn softmax_delta(
    cache: &ActivationCache,
    layer: usize,
    head: usize,
    lambda: &Tensor,
) -> Tensor {
    let hc = &cache.layers[layer].heads[head];
    let t = lambda.rows();
    let dh = lambda.cols();
    let mut delta = Tensor::zeros2(t, t);
    for i in 0..t {
        let lam = lambda.row(i);
        if lam.iter().all(|&v| v == 0.0) {
            continue;
        }
        let mean = hc.means.row(i);
        for j in 0..=i {
            let a = hc.attn.get2(i, j);
            if a == 0.0 {
                continue;
            }
            let v = hc.values.row(j);
            let mut centered = 0.0;
            for c in 0..dh {
                centered += (v[c] - mean[c]) * lam[c];
            }
            delta.set2(i, j, a * centered);
        }
    }
    delta
}

/// Value path: per key position, the effective value weight applied to
/// the attention-weighted sum of projected targets.
pub fn propagate_attention_value(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    cache: &ActivationCache,
    layer: usize,
    head: usize,
    t_mid: &Tensor,
) -> Tensor {
    let lw = &weights.layers[layer];
    let lc = &cache.layers[layer];
    let hc = &lc.heads[head];
    let dh = cfg.head_dim;
    let col0 = head * dh;
    let t = t_mid.rows();
    let lambda = project_head_targets(weights, cfg, layer, head, t_mid);

    // s_j = sum_{i >= j} alpha_ij lambda_i
    let mut acc = Tensor::zeros2(t, dh);
    for i in 0..t {
        let lam = lambda.row(i);
        if lam.iter().all(|&v| v == 0.0) {
            continue;
        }
        for j in 0..=i {
            let a = hc.attn.get2(i, j);
            if a == 0.0 {
                continue;
            }
            for (s, &l) in acc.row_mut(j).iter_mut().zip(lam) {
                *s += a * l;
            }
        }
    }

    let mut out = Tensor::zeros2(t, cfg.d_model);
    for j in 0..t {
        let s = acc.row(j);
        if s.iter().all(|&v| v == 0.0) {
            continue;
        }
        let mut raw = vec![0.0; cfg.d_model];
        for (c, r) in raw.iter_mut().enumerate() {
            *r = dot(&lw.w_v.row(c)[col0..col0 + dh], s);
        }
        fold_norm(out.row_mut(j), &raw, lw.gamma_attn.data(), lc.sigma_attn[j]);
    }
    out
}

/// Query path: the softmax sensitivities chained through the rotated
/// keys, with the rotation undone at the query position.
pub fn propagate_attention_query(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    cache: &ActivationCache,
    layer: usize,
    head: usize,
    delta: &Tensor,
) -> Result<Tensor> {
    let lw = &weights.layers[layer];
    let lc = &cache.layers[layer];
    let hc = &lc.heads[head];
    let dh = cfg.head_dim;
    let col0 = head * dh;
    let t = delta.rows();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    let mut out = Tensor::zeros2(t, cfg.d_model);
    for i in 0..t {
        let d_row = delta.row(i);
        let mut acc = vec![0.0; dh];
        let mut any = false;
        for j in 0..=i {
            let d = d_row[j];
            if d == 0.0 {
                continue;
            }
            any = true;
            for (a, &k) in acc.iter_mut().zip(hc.k_rot.row(j)) {
                *a += d * k * inv_sqrt;
            }
        }
        if !any {
            continue;
        }
        let unrotated = rope_rotate_inverse(&acc, i, cfg.rope_base)?;
        let mut raw = vec![0.0; cfg.d_model];
        for (c, r) in raw.iter_mut().enumerate() {
            *r = dot(&lw.w_q.row(c)[col0..col0 + dh], &unrotated);
        }
        fold_norm(out.row_mut(i), &raw, lw.gamma_attn.data(), lc.sigma_attn[i]);
    }
    Ok(out)
}

/// Key path: symmetric to the query path, aggregating over the query
/// positions attending to each key.
pub fn propagate_attention_key(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    cache: &ActivationCache,
    layer: usize,
    head: usize,
    delta: &Tensor,
) -> Result<Tensor> {
    let lw = &weights.layers[layer];
    let lc = &cache.layers[layer];
    let hc = &lc.heads[head];
    let dh = cfg.head_dim;
    let col0 = head * dh;
    let t = delta.rows();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    let mut acc = Tensor::zeros2(t, dh);
    let mut touched = vec![false; t];
    for i in 0..t {
        let d_row = delta.row(i);
        let q = hc.q_rot.row(i);
        for j in 0..=i {
            let d = d_row[j];
            if d == 0.0 {
                continue;
            }
            touched[j] = true;
            for (a, &qv) in acc.row_mut(j).iter_mut().zip(q) {
                *a += d * qv * inv_sqrt;
            }
        }
    }

    let mut out = Tensor::zeros2(t, cfg.d_model);
    for j in 0..t {
        if !touched[j] {
            continue;
        }
        let unrotated = rope_rotate_inverse(acc.row(j), j, cfg.rope_base)?;
        let mut raw = vec![0.0; cfg.d_model];
        for (c, r) in raw.iter_mut().enumerate() {
            *r = dot(&lw.w_k.row(c)[col0..col0 + dh], &unrotated);
        }
        fold_norm(out.row_mut(j), &raw, lw.gamma_attn.data(), lc.sigma_attn[j]);
    }
    Ok(out)
}

/// Back-propagate the target through one layer: GLU first (it wrote
/// last), then all attention heads. The GLU sum over neurons is fused
/// into matrix products; per-neuron summation gives the same result.
pub fn propagate_layer(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    cache: &ActivationCache,
    layer: usize,
    mu: &PathWeights,
    t_in: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let lw = &weights.layers[layer];
    let lc = &cache.layers[layer];
    let t = t_in.rows();
    let d = cfg.d_model;
    let d_ffn = cfg.d_ffn;

    // GLU: t_mid = t_in + sum_n (mu_up g_up + mu_gate g_gate)
    let mut t_mid = t_in.clone();
    for i in 0..t {
        let t_row = t_in.row(i);
        if t_row.iter().all(|&v| v == 0.0) {
            continue;
        }
        // lambda_n = w_d^(n) . t_i for all neurons at once
        let mut lambda = vec![0.0; d_ffn];
        for (n, l) in lambda.iter_mut().enumerate() {
            *l = dot(lw.w_d.row(n), t_row);
        }
        let mut up_coef = vec![0.0; d_ffn];
        let mut gate_coef = vec![0.0; d_ffn];
        for n in 0..d_ffn {
            up_coef[n] = mu.mu_up * lc.glu.gate_act.get2(i, n) * lambda[n];
            gate_coef[n] = mu.mu_gate
                * logistic(lc.glu.pre_act.get2(i, n))
                * lc.glu.up.get2(i, n)
                * lambda[n];
        }
        let sigma = lc.sigma_mlp[i];
        let gamma = lw.gamma_mlp.data();
        let out_row = t_mid.row_mut(i);
        for c in 0..d {
            let raw = dot(lw.w_u.row(c), &up_coef) + dot(lw.w_g.row(c), &gate_coef);
            out_row[c] += raw * gamma[c] / sigma;
        }
    }

    // attention: t_out = t_mid + sum_h (mu_q g_q + mu_k g_k + mu_v g_v)
    let mut t_out = t_mid.clone();
    for h in 0..cfg.n_heads {
        if mu.mu_v != 0.0 {
            let gv = propagate_attention_value(weights, cfg, cache, layer, h, &t_mid);
            for i in 0..t {
                for (o, &g) in t_out.row_mut(i).iter_mut().zip(gv.row(i)) {
                    *o += mu.mu_v * g;
                }
            }
        }
        if mu.mu_q != 0.0 || mu.mu_k != 0.0 {
            let lambda = project_head_targets(weights, cfg, layer, h, &t_mid);
            let delta = softmax_delta(cache, layer, h, &lambda);
            if mu.mu_q != 0.0 {
                let gq = propagate_attention_query(weights, cfg, cache, layer, h, &delta)?;
                for i in 0..t {
                    for (o, &g) in t_out.row_mut(i).iter_mut().zip(gq.row(i)) {
                        *o += mu.mu_q * g;
                    }
                }
            }
            if mu.mu_k != 0.0 {
                let gk = propagate_attention_key(weights, cfg, cache, layer, h, &delta)?;
                for i in 0..t {
                    for (o, &g) in t_out.row_mut(i).iter_mut().zip(gk.row(i)) {
                        *o += mu.mu_k * g;
                    }
                }
            }
        }
    }

    Ok((t_mid, t_out))
}

/// Stage 2: full top-down propagation, recording the target at every
/// residual site from the top down to the token level.
pub fn propagate_all(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    cache: &ActivationCache,
    spec: TargetSpec,
    mu: &PathWeights,
) -> Result<EffectiveTargets> {
    mu.validate()?;
    let top = init_target(spec, weights, cfg, cache)?;
    let l_total = cfg.n_layers;
    let mut after = vec![Tensor::zeros2(0, 0); l_total + 1];
    let mut mid = vec![Tensor::zeros2(0, 0); l_total];
    after[l_total] = top;
    for layer in (0..l_total).rev() {
        let (t_mid, t_out) = propagate_layer(weights, cfg, cache, layer, mu, &after[layer + 1])?;
        mid[layer] = t_mid;
        after[layer] = t_out;
    }
    Ok(EffectiveTargets { spec, after, mid })
}

/// Token attribution: each embedding row dotted with its token-level
/// effective target.
pub fn score_tokens(targets: &EffectiveTargets, cache: &ActivationCache) -> Vec<f64> {
    let t0 = targets.token_level();
    (0..cache.seq_len())
        .map(|i| dot(cache.embeddings.row(i), t0.row(i)))
        .collect()
}

/// Head attribution: the head's cached contribution rows dotted with the
/// mid-site target, summed over positions.
pub fn score_heads(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    targets: &EffectiveTargets,
    cache: &ActivationCache,
) -> Tensor {
    let mut scores = Tensor::zeros2(cfg.n_layers, cfg.n_heads);
    for l in 0..cfg.n_layers {
        for h in 0..cfg.n_heads {
            let lambda = project_head_targets(weights, cfg, l, h, &targets.mid[l]);
            let means = &cache.layers[l].heads[h].means;
            let mut s = 0.0;
            for i in 0..lambda.rows() {
                s += dot(means.row(i), lambda.row(i));
            }
            scores.set2(l, h, s);
        }
    }
    scores
}

/// Neuron attribution: the neuron's cached contribution rows dotted with
/// the layer-output target, summed over positions.
pub fn score_neurons(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    targets: &EffectiveTargets,
    cache: &ActivationCache,
) -> Tensor {
    let mut scores = Tensor::zeros2(cfg.n_layers, cfg.d_ffn);
    for l in 0..cfg.n_layers {
        let lw = &weights.layers[l];
        let lc = &cache.layers[l];
        let t_site = &targets.after[l + 1];
        for i in 0..t_site.rows() {
            let t_row = t_site.row(i);
            if t_row.iter().all(|&v| v == 0.0) {
                continue;
            }
            for n in 0..cfg.d_ffn {
                let coef = lc.glu.gate_act.get2(i, n) * lc.glu.up.get2(i, n);
                if coef == 0.0 {
                    continue;
                }
                let s = scores.get2(l, n) + coef * dot(lw.w_d.row(n), t_row);
                scores.set2(l, n, s);
            }
        }
    }
    scores
}

/// Stage-3 scores for an arbitrary subset of components. Cost is one dot
/// product per component per position; the propagation is shared.
pub fn score_components(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    targets: &EffectiveTargets,
    cache: &ActivationCache,
    components: &[crate::baselines::ComponentRef],
) -> Result<Vec<f64>> {
    use crate::baselines::ComponentKind;
    let mut out = Vec::with_capacity(components.len());
    for component in components {
        component.validate(cfg, cache.seq_len())?;
        let score = match component.kind {
            ComponentKind::Head => {
                let lambda = project_head_targets(
                    weights,
                    cfg,
                    component.layer,
                    component.index,
                    &targets.mid[component.layer],
                );
                let means = &cache.layers[component.layer].heads[component.index].means;
                (0..lambda.rows())
                    .map(|i| dot(means.row(i), lambda.row(i)))
                    .sum()
            }
            ComponentKind::Neuron => {
                let lw = &weights.layers[component.layer];
                let lc = &cache.layers[component.layer];
                let t_site = &targets.after[component.layer + 1];
                let mut s = 0.0;
                for i in 0..t_site.rows() {
                    let coef = lc.glu.gate_act.get2(i, component.index)
                        * lc.glu.up.get2(i, component.index);
                    if coef != 0.0 {
                        s += coef * dot(lw.w_d.row(component.index), t_site.row(i));
                    }
                }
                s
            }
            ComponentKind::Token => {
                dot(
                    cache.embeddings.row(component.index),
                    targets.token_level().row(component.index),
                )
            }
        };
        out.push(score);
    }
    Ok(out)
}

/// End-to-end Stage 2 + Stage 3 on an existing forward cache.
pub fn attribute(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    cache: &ActivationCache,
    spec: TargetSpec,
    mu: &PathWeights,
) -> Result<AttributionScores> {
    let targets = propagate_all(weights, cfg, cache, spec, mu)?;
    Ok(AttributionScores {
        token_scores: score_tokens(&targets, cache),
        head_scores: score_heads(weights, cfg, &targets, cache),
        neuron_scores: score_neurons(weights, cfg, &targets, cache),
        path_weights: *mu,
        spec,
    })
}
