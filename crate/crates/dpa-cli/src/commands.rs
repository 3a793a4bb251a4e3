//! The four subcommands: make-model, attribute, evaluate, bench.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::Deserialize;

use dpa_core::baselines::{
    activation_patch, atp_scores, attention_scores, component_candidates, input_x_gradient,
    magnitude_scores, random_scores, rollout, AttentionVariant, BaselineMethod, ComponentKind,
    MagnitudeVariant,
};
use dpa_core::dpa::{
    attribute, propagate_all, score_components, sensitivity_config, PathWeights, SensitivityKind,
    TargetSpec,
};
use dpa_core::faithfulness::{
    candidates, run_curve, AblationSpec, CurveMode, FaithfulnessCurve, Granularity,
    TokenAblation,
};
use dpa_core::forward::{forward, forward_logits, ForwardEdits};
use dpa_core::model::{ModelConfig, ModelWeights};
use dpa_core::stats;
use dpa_core::zoo::{self, CircuitKind};

use crate::html;
use crate::report::{
    BenchReport, BenchRow, FaithfulnessReport, FaithfulnessSummary, InstanceCurves,
    ModelDescription, PathWeightsInfo, Report, ScoreEntry, ScoreTable, TargetInfo,
};

/// Usage-class failures exit with code 2, runtime failures with 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn load(path: &Path) -> CliResult<(ModelWeights, ModelConfig)> {
    zoo::load_model(path)
        .with_context(|| format!("loading model {}", path.display()))
        .map_err(CliError::Runtime)
}

/// Write a report: to stdout when the path is "-", to a file otherwise.
fn emit_report(report: &Report, out: &Path) -> CliResult<()> {
    let json = serde_json::to_string_pretty(report).map_err(anyhow::Error::from)?;
    if out == Path::new("-") {
        println!("{json}");
    } else {
        std::fs::write(out, json).with_context(|| format!("writing {}", out.display()))?;
        eprintln!("report written to {}", out.display());
    }
    Ok(())
}

pub fn parse_usize_list(s: &str) -> CliResult<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| usage(format!("invalid integer '{p}'")))
        })
        .collect()
}

pub fn parse_f64_list(s: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| usage(format!("invalid number '{p}'")))
        })
        .collect()
}

fn parse_mu(mu: &str, p: f64) -> CliResult<PathWeights> {
    let kind: SensitivityKind = mu.parse().map_err(|e| usage(format!("{e}")))?;
    sensitivity_config(kind, p).map_err(|e| usage(format!("{e}")))
}

// ---------------------------------------------------------------------------
// make-model
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
pub struct MakeModelArgs {
    pub kind: String,
    pub seed: u64,
    pub out: PathBuf,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub d_model: Option<usize>,
    pub head_dim: Option<usize>,
    pub d_ffn: Option<usize>,
    pub vocab: Option<usize>,
    pub rope_base: Option<f64>,
    pub norm_eps: Option<f64>,
}

pub fn cmd_make_model(args: MakeModelArgs) -> CliResult<()> {
    let kind = match args.kind.as_str() {
        "induction" => CircuitKind::Induction,
        "kv-neuron" => CircuitKind::KvNeuron,
        "random" => CircuitKind::Random,
        other => return Err(usage(format!("unknown model kind '{other}'"))),
    };
    let base = zoo::default_config(kind);
    let n_heads = args.heads.unwrap_or(base.n_heads);
    let d_model = args.d_model.unwrap_or(base.d_model);
    let cfg = ModelConfig::new(
        args.layers.unwrap_or(base.n_layers),
        n_heads,
        d_model,
        args.head_dim.unwrap_or(d_model / n_heads),
        args.d_ffn.unwrap_or(base.d_ffn),
        args.vocab.unwrap_or(base.vocab_size),
        args.rope_base.unwrap_or(base.rope_base),
        args.norm_eps.unwrap_or(base.norm_eps),
    )
    .map_err(|e| usage(format!("{e}")))?;

    let built = zoo::build(&zoo::PlantedCircuitSpec {
        kind,
        config: cfg.clone(),
        seed: args.seed,
    })
    .map_err(|e| match e {
        dpa_core::DpaError::Config(msg) => usage(msg),
        other => CliError::Runtime(other.into()),
    })?;
    zoo::save_model(&built.weights, &cfg, &args.out)?;
    eprintln!("model written to {}", args.out.display());
    if !built.ground_truth.is_empty() {
        println!("ground truth components:");
        for c in &built.ground_truth {
            println!("  {c}");
        }
        println!(
            "demo: tokens {:?} -> expects token {} at position {}",
            built.demo_tokens, built.demo_target, built.demo_position
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// attribute
// ---------------------------------------------------------------------------

pub struct AttributeArgs {
    pub model: PathBuf,
    pub tokens: Vec<usize>,
    pub target: usize,
    pub position: usize,
    pub granularity: String,
    pub mu: String,
    pub p: f64,
    pub top: usize,
    pub full: bool,
    pub out: PathBuf,
    pub html: Option<PathBuf>,
}

fn score_table(matrix: &dpa_core::Tensor, top: usize, full: bool) -> ScoreTable {
    let mut entries: Vec<ScoreEntry> = (0..matrix.rows())
        .flat_map(|l| {
            (0..matrix.cols()).map(move |i| (l, i))
        })
        .map(|(l, i)| ScoreEntry {
            layer: l,
            index: i,
            score: matrix.get2(l, i),
        })
        .collect();
    entries.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("finite scores")
            .then((a.layer, a.index).cmp(&(b.layer, b.index)))
    });
    entries.truncate(top);
    ScoreTable {
        top: entries,
        full: full.then(|| {
            (0..matrix.rows())
                .map(|l| matrix.row(l).to_vec())
                .collect()
        }),
    }
}

pub fn cmd_attribute(args: AttributeArgs) -> CliResult<()> {
    let (weights, cfg) = load(&args.model)?;
    let mu = parse_mu(&args.mu, args.p)?;
    let (want_tokens, want_components) = match args.granularity.as_str() {
        "all" => (true, true),
        "token" => (true, false),
        "component" => (false, true),
        other => return Err(usage(format!("unknown granularity '{other}'"))),
    };
    if args.position >= args.tokens.len() {
        return Err(usage(format!(
            "position {} out of range for {} tokens",
            args.position,
            args.tokens.len()
        )));
    }
    let spec = TargetSpec {
        token: args.target,
        position: args.position,
    };
    let out = forward(&args.tokens, &weights, &cfg)?;
    let scores = attribute(&weights, &cfg, &out.cache, spec, &mu)?;

    let mut report = Report::new(
        "attribute",
        ModelDescription {
            path: args.model.display().to_string(),
            config: cfg.clone(),
        },
    );
    report.target = Some(TargetInfo {
        token: spec.token,
        position: spec.position,
    });
    report.path_weights = Some(PathWeightsInfo::from(mu));
    report.tokens = Some(args.tokens.clone());
    if want_tokens {
        report.token_scores = Some(scores.token_scores.clone());
    }
    if want_components {
        report.head_scores = Some(score_table(&scores.head_scores, args.top, args.full));
        report.neuron_scores = Some(score_table(&scores.neuron_scores, args.top, args.full));
    }

    if let Some(html_path) = &args.html {
        std::fs::write(html_path, html::render(&report))
            .with_context(|| format!("writing {}", html_path.display()))?;
        eprintln!("html written to {}", html_path.display());
    }
    emit_report(&report, &args.out)
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct Instance {
    tokens: Vec<usize>,
    target: usize,
    position: usize,
}

pub struct EvaluateArgs {
    pub model: PathBuf,
    pub instances: PathBuf,
    pub method: String,
    pub granularity: String,
    pub k_grid: Vec<f64>,
    pub token_mode: String,
    pub mu: String,
    pub p: f64,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy)]
enum Method {
    Dpa,
    Baseline(BaselineMethod),
}

fn parse_method(s: &str) -> CliResult<Method> {
    if s == "dpa" {
        return Ok(Method::Dpa);
    }
    s.parse::<BaselineMethod>()
        .map(Method::Baseline)
        .map_err(|_| usage(format!("unknown method '{s}' (try dpa, activation-patching, random, ...)")))
}

fn method_supports(method: Method, granularity: Granularity) -> bool {
    use BaselineMethod::*;
    match method {
        Method::Dpa => true,
        Method::Baseline(b) => match granularity {
            Granularity::Token => matches!(
                b,
                ActivationPatching | InputXGradient | AttnLast | AttnMean | Rollout | Random
            ),
            Granularity::Component => matches!(
                b,
                ActivationPatching | AttnOnly | MlpOnly | NormOnly | Atp | Random
            ),
        },
    }
}

/// Scores aligned with the candidate pool for one instance.
#[allow(clippy::too_many_arguments)]
fn instance_ranking(
    method: Method,
    weights: &ModelWeights,
    cfg: &ModelConfig,
    tokens: &[usize],
    spec: &TargetSpec,
    granularity: Granularity,
    mu: &PathWeights,
    seed: u64,
) -> CliResult<Vec<f64>> {
    let pool = candidates(cfg, tokens.len(), spec, granularity);
    let scores = match method {
        Method::Dpa => {
            let out = forward(tokens, weights, cfg)?;
            let targets = propagate_all(weights, cfg, &out.cache, *spec, mu)?;
            score_components(weights, cfg, &targets, &out.cache, &pool)?
        }
        Method::Baseline(BaselineMethod::Random) => random_scores(pool.len(), seed),
        Method::Baseline(BaselineMethod::ActivationPatching) => pool
            .iter()
            .map(|c| activation_patch(weights, cfg, tokens, c, spec))
            .collect::<dpa_core::Result<_>>()?,
        Method::Baseline(BaselineMethod::Atp) => {
            let all = atp_scores(weights, cfg, tokens, spec)?;
            all // aligned with component_candidates == pool for components
        }
        Method::Baseline(
            b @ (BaselineMethod::AttnOnly | BaselineMethod::MlpOnly | BaselineMethod::NormOnly),
        ) => {
            let out = forward(tokens, weights, cfg)?;
            let variant = match b {
                BaselineMethod::AttnOnly => MagnitudeVariant::AttnOnly,
                BaselineMethod::MlpOnly => MagnitudeVariant::MlpOnly,
                _ => MagnitudeVariant::NormOnly,
            };
            magnitude_scores(weights, cfg, &out.cache, variant)?
        }
        Method::Baseline(BaselineMethod::InputXGradient) => {
            let per_position = input_x_gradient(weights, cfg, tokens, spec)?;
            pool.iter().map(|c| per_position[c.index]).collect()
        }
        Method::Baseline(b @ (BaselineMethod::AttnLast | BaselineMethod::AttnMean)) => {
            let out = forward(tokens, weights, cfg)?;
            let variant = if b == BaselineMethod::AttnLast {
                AttentionVariant::Last
            } else {
                AttentionVariant::Mean
            };
            let per_position = attention_scores(&out.cache, variant, spec.position);
            pool.iter().map(|c| per_position[c.index]).collect()
        }
        Method::Baseline(BaselineMethod::Rollout) => {
            let out = forward(tokens, weights, cfg)?;
            let per_position = rollout(&out.cache, spec.position);
            pool.iter().map(|c| per_position[c.index]).collect()
        }
    };
    Ok(scores)
}

pub fn cmd_evaluate(args: EvaluateArgs) -> CliResult<()> {
    let (weights, cfg) = load(&args.model)?;
    let method = parse_method(&args.method)?;
    let granularity = match args.granularity.as_str() {
        "token" => Granularity::Token,
        "component" => Granularity::Component,
        other => return Err(usage(format!("unknown granularity '{other}'"))),
    };
    if !method_supports(method, granularity) {
        return Err(usage(format!(
            "method '{}' does not support granularity '{}'",
            args.method, args.granularity
        )));
    }
    let token_mode = match args.token_mode.as_str() {
        "zero-embed" => TokenAblation::ZeroEmbed,
        "remove" => TokenAblation::Remove,
        other => return Err(usage(format!("unknown token mode '{other}'"))),
    };
    let mu = parse_mu(&args.mu, args.p)?;

    let raw = std::fs::read_to_string(&args.instances)
        .with_context(|| format!("reading {}", args.instances.display()))?;
    let mut instances = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = serde_json::from_str(line)
            .with_context(|| format!("instances line {}", lineno + 1))?;
        instances.push(inst);
    }
    if instances.is_empty() {
        return Err(usage("instances file is empty"));
    }

    let mut per_instance = Vec::new();
    for (idx, inst) in instances.iter().enumerate() {
        if inst.position >= inst.tokens.len() || inst.target >= cfg.vocab_size {
            return Err(usage(format!(
                "instance {}: position {} / target {} out of range ({} tokens, vocab {})",
                idx + 1,
                inst.position,
                inst.target,
                inst.tokens.len(),
                cfg.vocab_size
            )));
        }
        let spec = TargetSpec {
            token: inst.target,
            position: inst.position,
        };
        let ranking = instance_ranking(
            method,
            &weights,
            &cfg,
            &inst.tokens,
            &spec,
            granularity,
            &mu,
            args.seed.wrapping_add(idx as u64),
        )?;
        let run = |mode: CurveMode| -> CliResult<FaithfulnessCurve> {
            let abl = AblationSpec::new(granularity, mode, token_mode, args.k_grid.clone())?;
            Ok(run_curve(&weights, &cfg, &inst.tokens, &spec, &ranking, &abl)?)
        };
        let disruption = match run(CurveMode::Disruption) {
            Err(CliError::Runtime(e))
                if matches!(
                    e.downcast_ref::<dpa_core::DpaError>(),
                    Some(dpa_core::DpaError::UndefinedInstance(_))
                ) =>
            {
                eprintln!("skipping instance {}: {e}", idx + 1);
                continue;
            }
            other => other?,
        };
        per_instance.push(InstanceCurves {
            tokens: inst.tokens.clone(),
            target: inst.target,
            position: inst.position,
            disruption,
            recovery: run(CurveMode::Recovery)?,
        });
    }
    if per_instance.is_empty() {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "every instance was skipped (clean target probability underflowed)"
        )));
    }

    let mean_curve = |pick: fn(&InstanceCurves) -> &FaithfulnessCurve| -> Vec<(f64, f64)> {
        args.k_grid
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let ys: Vec<f64> = per_instance.iter().map(|c| pick(c).points[i].1).collect();
                (k, stats::mean(&ys))
            })
            .collect()
    };
    let dis_aucs: Vec<f64> = per_instance.iter().map(|c| c.disruption.auc).collect();
    let rec_aucs: Vec<f64> = per_instance.iter().map(|c| c.recovery.auc).collect();
    let dis_points = 100.0 * stats::mean(&dis_aucs);
    let rec_points = 100.0 * stats::mean(&rec_aucs);

    let mut report = Report::new(
        "evaluate",
        ModelDescription {
            path: args.model.display().to_string(),
            config: cfg.clone(),
        },
    );
    report.path_weights = Some(PathWeightsInfo::from(mu));
    report.faithfulness = Some(FaithfulnessReport {
        method: args.method.clone(),
        granularity: args.granularity.clone(),
        token_mode: args.token_mode.clone(),
        k_grid: args.k_grid.clone(),
        summary: FaithfulnessSummary {
            mean_disruption_curve: mean_curve(|c| &c.disruption),
            mean_recovery_curve: mean_curve(|c| &c.recovery),
            disruption_auc_points: dis_points,
            recovery_auc_points: rec_points,
            total_points: rec_points - dis_points,
        },
        instances: per_instance,
    });
    emit_report(&report, &args.out)
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

pub struct BenchArgs {
    pub model: PathBuf,
    pub tokens: Vec<usize>,
    pub components: String,
    pub repeats: usize,
    pub target: Option<usize>,
    pub position: Option<usize>,
    pub out: PathBuf,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    xs[xs.len() / 2]
}

pub fn cmd_bench(args: BenchArgs) -> CliResult<()> {
    if args.repeats == 0 {
        return Err(usage("repeats must be at least 1"));
    }
    let (weights, cfg) = load(&args.model)?;
    let all = component_candidates(&cfg);
    let mut counts = Vec::new();
    for part in args.components.split(',') {
        let part = part.trim();
        if part == "all" {
            counts.push(all.len());
        } else {
            let m: usize = part
                .parse()
                .map_err(|_| usage(format!("invalid component count '{part}'")))?;
            if m == 0 || m > all.len() {
                return Err(usage(format!(
                    "component count {m} out of range 1..={}",
                    all.len()
                )));
            }
            counts.push(m);
        }
    }
    if counts.is_empty() {
        return Err(usage("no component counts given"));
    }

    let position = args.position.unwrap_or(args.tokens.len() - 1);
    if position >= args.tokens.len() {
        return Err(usage(format!(
            "position {position} out of range for {} tokens",
            args.tokens.len()
        )));
    }
    if let Some(t) = args.target {
        if t >= cfg.vocab_size {
            return Err(usage(format!(
                "target {t} out of range for vocab size {}",
                cfg.vocab_size
            )));
        }
    }
    let target = match args.target {
        Some(t) => t,
        None => {
            // default target: the model's argmax at the attribution position
            let logits = forward_logits(&args.tokens, &weights, &cfg, &ForwardEdits::none())?;
            let row = logits.row(position);
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
                .expect("nonempty vocab")
                .0
        }
    };
    let spec = TargetSpec { token: target, position };

    // warm caches before timing anything
    {
        let out = forward(&args.tokens, &weights, &cfg)?;
        let mu = sensitivity_config(SensitivityKind::ControlContent, 0.5).expect("mu");
        let targets = propagate_all(&weights, &cfg, &out.cache, spec, &mu)?;
        let _ = score_components(&weights, &cfg, &targets, &out.cache, &all)?;
        let mut edits = ForwardEdits::none();
        edits.zero_heads.push((0, 0));
        let _ = forward_logits(&args.tokens, &weights, &cfg, &edits)?;
    }

    // timing unit: one clean forward
    let fwd_times: Vec<f64> = (0..args.repeats)
        .map(|_| {
            let t0 = Instant::now();
            let _ = forward_logits(&args.tokens, &weights, &cfg, &ForwardEdits::none());
            t0.elapsed().as_secs_f64()
        })
        .collect();
    let forward_seconds = median(fwd_times);

    let mut rows = Vec::new();
    for &m in &counts {
        let subset = &all[..m];
        let dpa_times: Vec<f64> = (0..args.repeats)
            .map(|_| {
                let t0 = Instant::now();
                let out = forward(&args.tokens, &weights, &cfg).expect("bench forward");
                let mu = sensitivity_config(SensitivityKind::ControlContent, 0.5).expect("mu");
                let targets =
                    propagate_all(&weights, &cfg, &out.cache, spec, &mu).expect("bench propagate");
                let scores = score_components(&weights, &cfg, &targets, &out.cache, subset)
                    .expect("bench scores");
                std::hint::black_box(scores);
                t0.elapsed().as_secs_f64()
            })
            .collect();
        let ap_times: Vec<f64> = (0..args.repeats)
            .map(|_| {
                let t0 = Instant::now();
                let clean = forward_logits(&args.tokens, &weights, &cfg, &ForwardEdits::none())
                    .expect("bench clean");
                let clean_logit = clean.get2(spec.position, spec.token);
                let mut deltas = Vec::with_capacity(m);
                for c in subset {
                    let mut edits = ForwardEdits::none();
                    match c.kind {
                        ComponentKind::Head => edits.zero_heads.push((c.layer, c.index)),
                        ComponentKind::Neuron => edits.zero_neurons.push((c.layer, c.index)),
                        ComponentKind::Token => edits.zero_embeddings.push(c.index),
                    }
                    let patched = forward_logits(&args.tokens, &weights, &cfg, &edits)
                        .expect("bench patched");
                    deltas.push(clean_logit - patched.get2(spec.position, spec.token));
                }
                std::hint::black_box(deltas);
                t0.elapsed().as_secs_f64()
            })
            .collect();
        let ap_seconds = median(ap_times);
        rows.push(BenchRow {
            components: m,
            dpa_seconds: median(dpa_times),
            ap_seconds,
            ap_forwards_equivalent: ap_seconds / forward_seconds,
        });
    }

    // ratio between the largest and smallest component counts timed
    let by_m_min = rows
        .iter()
        .min_by_key(|r| r.components)
        .expect("nonempty rows");
    let by_m_max = rows
        .iter()
        .max_by_key(|r| r.components)
        .expect("nonempty rows");
    let (dpa_min, dpa_max) = (by_m_min.dpa_seconds, by_m_max.dpa_seconds);
    let slope = if rows.len() >= 2 {
        // least-squares slope of AP time against component count
        let ms: Vec<f64> = rows.iter().map(|r| r.components as f64).collect();
        let ts: Vec<f64> = rows.iter().map(|r| r.ap_seconds).collect();
        let mm = stats::mean(&ms);
        let mt = stats::mean(&ts);
        let num: f64 = ms.iter().zip(&ts).map(|(m, t)| (m - mm) * (t - mt)).sum();
        let den: f64 = ms.iter().map(|m| (m - mm) * (m - mm)).sum();
        num / den / forward_seconds
    } else {
        rows[0].ap_seconds / rows[0].components as f64 / forward_seconds
    };

    let mut report = Report::new(
        "bench",
        ModelDescription {
            path: args.model.display().to_string(),
            config: cfg.clone(),
        },
    );
    report.target = Some(TargetInfo {
        token: spec.token,
        position: spec.position,
    });
    report.tokens = Some(args.tokens.clone());
    report.bench = Some(BenchReport {
        repeats: args.repeats,
        single_forward_seconds: forward_seconds,
        rows,
        dpa_all_over_one_ratio: dpa_max / dpa_min,
        ap_slope_forwards_per_component: slope,
    });
    emit_report(&report, &args.out)?;
    // human-readable table on stderr
    if let Some(bench) = &report.bench {
        let mut msg = String::new();
        msg.push_str(&format!(
            "single forward: {:.3} ms\n",
            bench.single_forward_seconds * 1e3
        ));
        for r in &bench.rows {
            msg.push_str(&format!(
                "M={:>5}  dpa {:.3} ms  ap {:.3} ms ({:.1} forwards)\n",
                r.components,
                r.dpa_seconds * 1e3,
                r.ap_seconds * 1e3,
                r.ap_forwards_equivalent
            ));
        }
        msg.push_str(&format!(
            "dpa all/one ratio: {:.3}; ap slope: {:.2} forwards/component\n",
            bench.dpa_all_over_one_ratio, bench.ap_slope_forwards_per_component
        ));
        let _ = std::io::stderr().write_all(msg.as_bytes());
    }
    Ok(())
}
