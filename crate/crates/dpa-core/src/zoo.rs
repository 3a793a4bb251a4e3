//! Toy-model construction: seeded random models, hand-planted circuits
//! with known ground truth, and the DPAW weight container.
//!
//! Planted models are built so that the causally responsible components
//! are known by design and recoverable with the activation-patching
//! oracle. MLP blocks in the attention circuits stay wired (nonzero up
//! and down projections) but are silenced through gate saturation
//! (pre-activations at or below -40), so GLU caches remain exercised.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::baselines::{ComponentKind, ComponentRef};
use crate::error::{DpaError, Result};
use crate::model::{LayerWeights, ModelConfig, ModelWeights};
use crate::tensor::Tensor;

/// Kinds of models the zoo can build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CircuitKind {
    Induction,
    KvNeuron,
    Random,
}

/// Request for a zoo model.
#[derive(Debug, Clone)]
pub struct PlantedCircuitSpec {
    pub kind: CircuitKind,
    pub config: ModelConfig,
    pub seed: u64,
}

/// A built model together with its documented ground truth.
#[derive(Debug, Clone)]
pub struct BuiltModel {
    pub config: ModelConfig,
    pub weights: ModelWeights,
    /// Components that implement the planted behavior (empty for random).
    pub ground_truth: Vec<ComponentRef>,
    /// A canonical prompt exhibiting the behavior.
    pub demo_tokens: Vec<usize>,
    /// Expected argmax next token at `demo_position`.
    pub demo_target: usize,
    pub demo_position: usize,
}

/// Default configuration per kind, sized for the planted constructions.
pub fn default_config(kind: CircuitKind) -> ModelConfig {
    match kind {
        CircuitKind::Induction => {
            ModelConfig::new(2, 2, 32, 16, 4, 8, 10_000.0, 1e-5).expect("valid default")
        }
        CircuitKind::KvNeuron => {
            ModelConfig::new(1, 2, 16, 8, 8, 8, 10_000.0, 1e-5).expect("valid default")
        }
        CircuitKind::Random => {
            ModelConfig::new(2, 2, 16, 8, 16, 16, 10_000.0, 1e-5).expect("valid default")
        }
    }
}

/// Build a model from the request, dispatching on kind.
pub fn build(spec: &PlantedCircuitSpec) -> Result<BuiltModel> {
    match spec.kind {
        CircuitKind::Random => {
            let weights = build_random(&spec.config, spec.seed)?;
            Ok(BuiltModel {
                config: spec.config.clone(),
                weights,
                ground_truth: Vec::new(),
                demo_tokens: vec![0],
                demo_target: 0,
                demo_position: 0,
            })
        }
        CircuitKind::Induction => build_induction(&spec.config),
        CircuitKind::KvNeuron => build_kv_neuron(&spec.config),
    }
}

fn sample_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect();
    Tensor::from_raw(vec![rows, cols], data)
}

fn sample_gamma<R: Rng>(rng: &mut R, dim: usize) -> Tensor {
    let data = (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            1.0 + 0.05 * z
        })
        .collect();
    Tensor::from_raw(vec![dim], data)
}

/// Seeded random model: projection entries are normal with scale
/// 1/sqrt(d), norm scales sit near one. Bit-exact reproducible per seed.
pub fn build_random(cfg: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let scale = 1.0 / (d as f64).sqrt();
    let embedding = sample_matrix(&mut rng, cfg.vocab_size, d, scale);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        layers.push(LayerWeights {
            w_q: sample_matrix(&mut rng, d, d, scale),
            w_k: sample_matrix(&mut rng, d, d, scale),
            w_v: sample_matrix(&mut rng, d, d, scale),
            w_o: sample_matrix(&mut rng, d, d, scale),
            w_g: sample_matrix(&mut rng, d, cfg.d_ffn, scale),
            w_u: sample_matrix(&mut rng, d, cfg.d_ffn, scale),
            w_d: sample_matrix(&mut rng, cfg.d_ffn, d, scale),
            gamma_attn: sample_gamma(&mut rng, d),
            gamma_mlp: sample_gamma(&mut rng, d),
        });
    }
    let gamma_final = sample_gamma(&mut rng, d);
    let unembedding = sample_matrix(&mut rng, d, cfg.vocab_size, scale);
    let weights = ModelWeights {
        embedding,
        layers,
        gamma_final,
        unembedding,
    };
    weights.validate(cfg)?;
    Ok(weights)
}

fn zero_layer(cfg: &ModelConfig) -> LayerWeights {
    let d = cfg.d_model;
    LayerWeights {
        w_q: Tensor::zeros2(d, d),
        w_k: Tensor::zeros2(d, d),
        w_v: Tensor::zeros2(d, d),
        w_o: Tensor::zeros2(d, d),
        w_g: Tensor::zeros2(d, cfg.d_ffn),
        w_u: Tensor::zeros2(d, cfg.d_ffn),
        w_d: Tensor::zeros2(cfg.d_ffn, d),
        gamma_attn: Tensor::new(vec![d], vec![1.0; d]).expect("finite"),
        gamma_mlp: Tensor::new(vec![d], vec![1.0; d]).expect("finite"),
    }
}

/// Maximum prompt length the planted positional patterns are tuned for.
pub const PLANTED_MAX_LEN: usize = 64;

/// Per-block (index, 2-D coefficient) pairs for a head's rotation blocks.
type BlockCoefficients = Vec<(usize, [f64; 2])>;

/// Positional attention pattern built from a constant key direction and a
/// phase-shifted query. The resulting score depends only on the offset
/// j - i and is maximal at `offset_target`, with a pre-softmax gap of at
/// least `margin` against every other offset reachable within
/// `PLANTED_MAX_LEN` positions.
///
/// Returns (query coefficients, key coefficients) over the head's 2-D
/// rotation blocks `blocks`, scaled so the margin holds.
fn positional_pattern(
    cfg: &ModelConfig,
    blocks: &[usize],
    offset_target: i64,
    margin: f64,
    sigma: f64,
) -> (BlockCoefficients, BlockCoefficients) {
    let freqs = crate::forward::rope_frequencies(cfg.head_dim, cfg.rope_base);
    let score = |offset: i64| -> f64 {
        blocks
            .iter()
            .map(|&b| ((offset - offset_target) as f64 * freqs[b]).cos())
            .sum()
    };
    let peak = score(offset_target);
    let mut gap = f64::INFINITY;
    for off in -(PLANTED_MAX_LEN as i64 - 1)..=0 {
        if off == offset_target {
            continue;
        }
        gap = gap.min(peak - score(off));
    }
    // raw score = (s^2 / sigma^2) * f(offset) / sqrt(d_h); pick s so that
    // gap * beta >= margin
    let beta = margin / gap;
    let s = (beta * sigma * sigma * (cfg.head_dim as f64).sqrt()).sqrt();
    let q = blocks
        .iter()
        .map(|&b| {
            let phase = offset_target as f64 * freqs[b];
            (b, [s * phase.cos(), s * phase.sin()])
        })
        .collect();
    let k = blocks.iter().map(|&b| (b, [s, 0.0])).collect();
    (q, k)
}

/// Silence a layer's GLU through gate saturation while keeping the block
/// wired: gates read the always-on bias coordinate with a large negative
/// coefficient, up projections stay nonzero, and down projections write
/// into spare coordinates.
fn disable_glu(lw: &mut LayerWeights, cfg: &ModelConfig, bias_coord: usize, sigma_mid: f64, spare0: usize) {
    for n in 0..cfg.d_ffn {
        lw.w_g.set2(bias_coord, n, -40.0 * sigma_mid);
        lw.w_u.set2(bias_coord, n, sigma_mid);
        let spare = spare0 + (n % (cfg.d_model - spare0));
        lw.w_d.set2(n, spare, 0.5);
    }
}

/// Two-layer induction circuit.
///
/// Residual coordinates are partitioned into a current-token code region
/// E, a previous-token code region P, one always-on bias coordinate, an
/// output region O read by the unembedding, and spare coordinates for the
/// silenced GLU writes. Layer 0 head 0 attends to the previous position
/// (phase-shifted positional pattern) and copies the E code into P.
/// Layer 1 head 1 matches its E-code query against keys built from
/// P/kappa - E, which cancels exactly at position 0 (whose P write is a
/// self-copy) and repels self-matches; its value copies the E code into O.
/// Sequences "... A B ... A" therefore predict B. Immediate token repeats
/// null their own key and are avoided by the prompt sampler.
pub fn build_induction(cfg: &ModelConfig) -> Result<BuiltModel> {
    cfg.validate()?;
    let v = cfg.vocab_size;
    let d = cfg.d_model;
    let dh = cfg.head_dim;
    if cfg.n_layers != 2 {
        return Err(DpaError::Config("induction circuit needs exactly 2 layers".into()));
    }
    if cfg.n_heads < 2 {
        return Err(DpaError::Config("induction circuit needs at least 2 heads".into()));
    }
    if dh < 16 {
        return Err(DpaError::Config(
            "induction circuit needs head_dim >= 16 (fast and slow rotation blocks)".into(),
        ));
    }
    if v > dh - 8 {
        return Err(DpaError::Config(format!(
            "induction circuit hosts at most head_dim - 8 = {} tokens, got vocab {}",
            dh - 8,
            v
        )));
    }
    if d < 3 * v + 2 {
        return Err(DpaError::Config(format!(
            "induction circuit needs d_model >= 3*vocab + 2 = {}, got {}",
            3 * v + 2,
            d
        )));
    }
    // token codes live in head coords 8.. and must barely rotate over the
    // supported prompt lengths
    let freqs = crate::forward::rope_frequencies(dh, cfg.rope_base);
    if freqs[4] * (PLANTED_MAX_LEN - 1) as f64 > 0.7 {
        return Err(DpaError::Config(format!(
            "rope_base {} rotates the code blocks too fast for the induction circuit",
            cfg.rope_base
        )));
    }

    // residual regions
    let e0 = 0; // current-token one-hot code
    let p0 = v; // previous-token code
    let bias = 2 * v; // always-on coordinate
    let o0 = 2 * v + 1; // unembedding readout region
    let spare0 = 3 * v + 1;

    let eps = cfg.norm_eps;
    let sigma1 = (2.0 / d as f64 + eps).sqrt();
    let kappa = 1.0; // magnitude of the P write
    let sigma2 = ((2.0 + kappa * kappa) / d as f64 + eps).sqrt();
    let sigma_mid2 = ((2.0 + kappa * kappa + 1.0) / d as f64 + eps).sqrt();

    let mut embedding = Tensor::zeros2(v, d);
    for t in 0..v {
        embedding.set2(t, e0 + t, 1.0);
        embedding.set2(t, bias, 1.0);
    }

    let prev_head = 0usize;
    let induction_head = 1usize;
    let mut layer0 = zero_layer(cfg);
    let mut layer1 = zero_layer(cfg);

    // layer 0, head 0: previous-position pattern on blocks 0 and 2
    let (qpat, kpat) = positional_pattern(cfg, &[0, 2], -1, 14.0, sigma1);
    let col0 = prev_head * dh;
    for (b, qv) in &qpat {
        layer0.w_q.set2(bias, col0 + 2 * b, qv[0]);
        layer0.w_q.set2(bias, col0 + 2 * b + 1, qv[1]);
    }
    for (b, kv) in &kpat {
        layer0.w_k.set2(bias, col0 + 2 * b, kv[0]);
        layer0.w_k.set2(bias, col0 + 2 * b + 1, kv[1]);
    }
    // value: copy the E code into head coords 0..v; output writes it to P
    for t in 0..v {
        layer0.w_v.set2(e0 + t, col0 + t, 1.0);
        layer0.w_o.set2(col0 + t, p0 + t, kappa * sigma1);
    }
    disable_glu(&mut layer0, cfg, bias, sigma2, spare0);

    // layer 1, head 1: match current-token code against previous-token keys
    let col1 = induction_head * dh;
    let code0 = 8; // head coords 8.. sit in slow rotation blocks
    let beta_c = 9.0;
    let s_qk = (beta_c * sigma2 * sigma2 * (dh as f64).sqrt()).sqrt();
    for t in 0..v {
        layer1.w_q.set2(e0 + t, col1 + code0 + t, s_qk);
        layer1.w_k.set2(p0 + t, col1 + code0 + t, s_qk / kappa);
        layer1.w_k.set2(e0 + t, col1 + code0 + t, -s_qk);
        layer1.w_v.set2(e0 + t, col1 + t, 1.0);
        layer1.w_o.set2(col1 + t, o0 + t, sigma2);
    }
    disable_glu(&mut layer1, cfg, bias, sigma_mid2, spare0);

    let mut unembedding = Tensor::zeros2(d, v);
    for t in 0..v {
        unembedding.set2(o0 + t, t, 4.0);
    }

    let weights = ModelWeights {
        embedding,
        layers: vec![layer0, layer1],
        gamma_final: Tensor::new(vec![d], vec![1.0; d]).expect("finite"),
        unembedding,
    };
    weights.validate(cfg)?;

    Ok(BuiltModel {
        config: cfg.clone(),
        weights,
        ground_truth: vec![
            ComponentRef::new(ComponentKind::Head, 0, prev_head),
            ComponentRef::new(ComponentKind::Head, 1, induction_head),
        ],
        demo_tokens: vec![1, 2, 3, 1],
        demo_target: 2,
        demo_position: 3,
    })
}

/// One-layer key-value neuron: a single GLU neuron whose gate opens only
/// on the trigger token and whose up/down path writes the unembedding
/// direction of the answer token. Attention is wired (uniform pattern)
/// but writes nothing; non-planted neurons are gate-saturated.
pub fn build_kv_neuron(cfg: &ModelConfig) -> Result<BuiltModel> {
    cfg.validate()?;
    let v = cfg.vocab_size;
    let d = cfg.d_model;
    if cfg.n_layers != 1 {
        return Err(DpaError::Config("kv-neuron circuit needs exactly 1 layer".into()));
    }
    if d < v + 2 {
        return Err(DpaError::Config(format!(
            "kv-neuron circuit needs d_model >= vocab + 2 = {}, got {}",
            v + 2,
            d
        )));
    }
    if v < 3 {
        return Err(DpaError::Config("kv-neuron circuit needs vocab >= 3".into()));
    }

    let bias = v;
    let o_coord = v + 1;
    // silenced neurons write spare coordinates when any exist, otherwise
    // the token-code region (their gates are saturated, so the writes
    // are numerically null either way)
    let (spare0, spare_len) = if d > v + 2 { (v + 2, d - v - 2) } else { (0, v) };
    let eps = cfg.norm_eps;
    let sigma1 = (2.0 / d as f64 + eps).sqrt();

    let trigger = 5.min(v - 1);
    let answer = 2.min(v - 1);
    let neuron = 3.min(cfg.d_ffn - 1);

    let mut embedding = Tensor::zeros2(v, d);
    for t in 0..v {
        embedding.set2(t, t, 1.0);
        embedding.set2(t, bias, 1.0);
    }

    let mut layer = zero_layer(cfg);
    // uniform attention pattern so the head caches stay nontrivial
    layer.w_q.set2(bias, 0, 1.0);
    layer.w_k.set2(bias, 0, 1.0);
    for n in 0..cfg.d_ffn {
        layer.w_g.set2(bias, n, -40.0 * sigma1);
        layer.w_u.set2(bias, n, sigma1);
        if n != neuron {
            let spare = spare0 + (n % spare_len);
            layer.w_d.set2(n, spare, 0.3);
        }
    }
    // the planted neuron: gate +40 on the trigger, -40 elsewhere
    layer.w_g.set2(trigger, neuron, 80.0 * sigma1);
    layer.w_d.set2(neuron, o_coord, 0.1);

    let mut unembedding = Tensor::zeros2(d, v);
    for t in 0..v {
        unembedding.set2(t, t, 2.0);
    }
    unembedding.set2(o_coord, answer, 2.0);

    let weights = ModelWeights {
        embedding,
        layers: vec![layer],
        gamma_final: Tensor::new(vec![d], vec![1.0; d]).expect("finite"),
        unembedding,
    };
    weights.validate(cfg)?;

    let filler = (0..v).find(|&t| t != trigger && t != answer).expect("vocab >= 3");
    Ok(BuiltModel {
        config: cfg.clone(),
        weights,
        ground_truth: vec![ComponentRef::new(ComponentKind::Neuron, 0, neuron)],
        demo_tokens: vec![filler, trigger],
        demo_target: answer,
        demo_position: 1,
    })
}

impl BuiltModel {
    /// Trigger/answer pair for kv models, derived from the ground truth demo.
    pub fn kv_trigger_answer(&self) -> (usize, usize) {
        (
            self.demo_tokens[self.demo_position],
            self.demo_target,
        )
    }
}

/// Sample a prompt exhibiting the planted behavior. Deterministic per seed.
///
/// Induction prompts look like `A B f1 .. fk A` where fillers avoid `A`
/// and immediate repeats; the expected completion is `B` at the last
/// position. Kv prompts are fillers followed by the trigger token.
pub fn sample_prompt(model: &BuiltModel, kind: CircuitKind, seed: u64) -> (Vec<usize>, usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = model.config.vocab_size;
    match kind {
        CircuitKind::Induction => {
            let a = rng.gen_range(0..v);
            let b = loop {
                let b = rng.gen_range(0..v);
                if b != a {
                    break b;
                }
            };
            let n_fill = rng.gen_range(1..=6);
            let mut tokens = vec![a, b];
            let mut prev = b;
            for _ in 0..n_fill {
                let f = loop {
                    let f = rng.gen_range(0..v);
                    if f != a && f != prev {
                        break f;
                    }
                };
                tokens.push(f);
                prev = f;
            }
            tokens.push(a);
            let pos = tokens.len() - 1;
            (tokens, b, pos)
        }
        CircuitKind::KvNeuron => {
            let (trigger, answer) = model.kv_trigger_answer();
            let n_fill = rng.gen_range(1..=5);
            let mut tokens = Vec::with_capacity(n_fill + 1);
            for _ in 0..n_fill {
                let f = loop {
                    let f = rng.gen_range(0..v);
                    if f != trigger {
                        break f;
                    }
                };
                tokens.push(f);
            }
            tokens.push(trigger);
            let pos = tokens.len() - 1;
            (tokens, answer, pos)
        }
        CircuitKind::Random => {
            let len = rng.gen_range(2..=8);
            let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..v)).collect();
            let target = rng.gen_range(0..v);
            let pos = tokens.len() - 1;
            (tokens, target, pos)
        }
    }
}

// ---------------------------------------------------------------------------
// DPAW container format
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"DPAW";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

fn tensor_names(n_layers: usize) -> Vec<String> {
    let mut names = vec!["embedding".to_string()];
    for l in 0..n_layers {
        for field in [
            "attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "wg", "wu", "wd",
        ] {
            names.push(format!("layers.{l}.{field}"));
        }
    }
    names.push("final_norm".to_string());
    names.push("unembedding".to_string());
    names
}

fn tensor_by_name<'a>(weights: &'a ModelWeights, name: &str) -> Option<&'a Tensor> {
    match name {
        "embedding" => Some(&weights.embedding),
        "final_norm" => Some(&weights.gamma_final),
        "unembedding" => Some(&weights.unembedding),
        _ => {
            let rest = name.strip_prefix("layers.")?;
            let (idx, field) = rest.split_once('.')?;
            let lw = weights.layers.get(idx.parse::<usize>().ok()?)?;
            Some(match field {
                "attn_norm" => &lw.gamma_attn,
                "wq" => &lw.w_q,
                "wk" => &lw.w_k,
                "wv" => &lw.w_v,
                "wo" => &lw.w_o,
                "mlp_norm" => &lw.gamma_mlp,
                "wg" => &lw.w_g,
                "wu" => &lw.w_u,
                "wd" => &lw.w_d,
                _ => return None,
            })
        }
    }
}

/// Serialize a model to the DPAW container: magic, version, header length,
/// a JSON header mapping tensor names to {shape, dtype, offset} plus a
/// `__config__` entry, then the raw little-endian f64 blob.
pub fn save_model(weights: &ModelWeights, cfg: &ModelConfig, path: &Path) -> Result<()> {
    weights.validate(cfg)?;
    let names = tensor_names(cfg.n_layers);
    let mut header: BTreeMap<String, serde_json::Value> = BTreeMap::new();
    header.insert("__config__".to_string(), serde_json::to_value(cfg)?);
    let mut offset = 0u64;
    let mut blob = Vec::new();
    for name in &names {
        let tensor = tensor_by_name(weights, name).expect("canonical name");
        header.insert(
            name.clone(),
            json!({
                "shape": tensor.shape(),
                "dtype": "f64",
                "offset": offset,
            }),
        );
        for &v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += (tensor.len() * 8) as u64;
    }
    let header_bytes = serde_json::to_vec(&header)?;

    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    file.write_all(&blob)?;
    Ok(())
}

fn read_tensor(blob: &[u8], entry: &TensorEntry, name: &str) -> Result<Tensor> {
    if entry.dtype != "f64" {
        return Err(DpaError::Format(format!(
            "tensor {name}: unsupported dtype {}",
            entry.dtype
        )));
    }
    let count: usize = entry.shape.iter().product();
    let start = entry.offset as usize;
    let end = start
        .checked_add(count * 8)
        .ok_or_else(|| DpaError::Format(format!("tensor {name}: offset overflow")))?;
    if end > blob.len() {
        return Err(DpaError::Format(format!(
            "tensor {name}: shape {:?} at offset {} exceeds blob length {}",
            entry.shape,
            entry.offset,
            blob.len()
        )));
    }
    let data: Vec<f64> = blob[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(entry.shape.clone(), data)
}

/// Load a DPAW container. Rejects bad magic, truncation, and header/blob
/// shape inconsistencies.
pub fn load_model(path: &Path) -> Result<(ModelWeights, ModelConfig)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(DpaError::Format("file too short for DPAW header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(DpaError::Format("bad magic, not a DPAW file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(DpaError::Format(format!("unsupported DPAW version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let blob_start = 16usize
        .checked_add(header_len)
        .ok_or_else(|| DpaError::Format("header length overflow".into()))?;
    if blob_start > bytes.len() {
        return Err(DpaError::Format("truncated header".into()));
    }
    let mut header: BTreeMap<String, serde_json::Value> =
        serde_json::from_slice(&bytes[16..blob_start])
            .map_err(|e| DpaError::Format(format!("invalid header JSON: {e}")))?;
    let cfg_value = header
        .remove("__config__")
        .ok_or_else(|| DpaError::Format("missing __config__ entry".into()))?;
    let cfg: ModelConfig = serde_json::from_value(cfg_value)
        .map_err(|e| DpaError::Format(format!("invalid __config__: {e}")))?;
    cfg.validate()?;

    let blob = &bytes[blob_start..];
    let mut fetch = |name: &str| -> Result<Tensor> {
        let value = header
            .remove(name)
            .ok_or_else(|| DpaError::Format(format!("missing tensor {name}")))?;
        let entry: TensorEntry = serde_json::from_value(value)
            .map_err(|e| DpaError::Format(format!("tensor {name}: bad entry: {e}")))?;
        read_tensor(blob, &entry, name)
    };

    let embedding = fetch("embedding")?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        layers.push(LayerWeights {
            gamma_attn: fetch(&format!("layers.{l}.attn_norm"))?,
            w_q: fetch(&format!("layers.{l}.wq"))?,
            w_k: fetch(&format!("layers.{l}.wk"))?,
            w_v: fetch(&format!("layers.{l}.wv"))?,
            w_o: fetch(&format!("layers.{l}.wo"))?,
            gamma_mlp: fetch(&format!("layers.{l}.mlp_norm"))?,
            w_g: fetch(&format!("layers.{l}.wg"))?,
            w_u: fetch(&format!("layers.{l}.wu"))?,
            w_d: fetch(&format!("layers.{l}.wd"))?,
        });
    }
    let gamma_final = fetch("final_norm")?;
    let unembedding = fetch("unembedding")?;

    let weights = ModelWeights {
        embedding,
        layers,
        gamma_final,
        unembedding,
    };
    weights.validate(&cfg).map_err(|e| match e {
        DpaError::Shape(msg) => DpaError::Format(format!("header/blob mismatch: {msg}")),
        other => other,
    })?;
    Ok((weights, cfg))
}
