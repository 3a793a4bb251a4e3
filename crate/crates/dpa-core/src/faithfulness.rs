//! Disruption/recovery faithfulness curves over ranked tokens or
//! components, with trapezoidal AUC aggregation.

use serde::{Deserialize, Serialize};

use crate::baselines::{component_candidates, ComponentKind, ComponentRef};
use crate::dpa::TargetSpec;
use crate::error::{DpaError, Result};
use crate::forward::{forward_logits, ForwardEdits};
use crate::model::{ModelConfig, ModelWeights};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    Token,
    Component,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurveMode {
    /// Ablate the top-k fraction, keep the rest.
    Disruption,
    /// Keep only the top-k fraction, ablate the complement.
    Recovery,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenAblation {
    /// Zero the token's embedding row (default).
    ZeroEmbed,
    /// Remove the token from the sequence.
    Remove,
}

/// How to ablate and where to sample the curve.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationSpec {
    pub granularity: Granularity,
    pub mode: CurveMode,
    pub token_mode: TokenAblation,
    /// Fractions of the candidate pool, sorted ascending within [0, 1].
    pub k_grid: Vec<f64>,
}

impl AblationSpec {
    pub fn new(
        granularity: Granularity,
        mode: CurveMode,
        token_mode: TokenAblation,
        k_grid: Vec<f64>,
    ) -> Result<Self> {
        if k_grid.is_empty() {
            return Err(DpaError::InvalidArgument("k_grid must be nonempty".into()));
        }
        if k_grid.iter().any(|k| !(0.0..=1.0).contains(k)) {
            return Err(DpaError::InvalidArgument(
                "k_grid values must lie in [0, 1]".into(),
            ));
        }
        if k_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DpaError::InvalidArgument(
                "k_grid must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            granularity,
            mode,
            token_mode,
            k_grid,
        })
    }
}

/// Log-spaced default sweep.
pub fn default_k_grid() -> Vec<f64> {
    vec![0.001, 0.005, 0.01, 0.05, 0.1, 0.2, 0.5]
}

/// One faithfulness curve: (fraction, retained probability ratio) points
/// plus their normalized trapezoidal area.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaithfulnessCurve {
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Retained probability ratio after ablation. Algebraically equal to
/// `1 - (p_clean - p_ablated) / p_clean`.
pub fn retained_ratio(p_clean: f64, p_ablated: f64) -> Result<f64> {
    if p_clean <= 0.0 {
        return Err(DpaError::UndefinedInstance(format!(
            "clean probability {p_clean} is not positive"
        )));
    }
    Ok(p_ablated / p_clean)
}

/// Trapezoidal area of the curve over the k span, normalized by the span
/// width so a constant curve at 1.0 scores 1.0.
pub fn auc(points: &[(f64, f64)]) -> f64 {
    if points.len() < 2 {
        return points.first().map(|&(_, y)| y).unwrap_or(0.0);
    }
    let span = points.last().expect("nonempty").0 - points[0].0;
    let mut area = 0.0;
    for w in points.windows(2) {
        let (k0, y0) = w[0];
        let (k1, y1) = w[1];
        area += (k1 - k0) * (y0 + y1) / 2.0;
    }
    area / span
}

/// Softmax probability of the target token at the attribution position.
pub fn target_probability(logits: &Tensor, spec: &TargetSpec) -> f64 {
    let row = logits.row(spec.position);
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    (row[spec.token] - max).exp() / denom
}

/// Candidate pool for a granularity. Token candidates exclude the
/// attribution position itself (removing the prediction site is
/// undefined).
pub fn candidates(
    cfg: &ModelConfig,
    seq_len: usize,
    spec: &TargetSpec,
    granularity: Granularity,
) -> Vec<ComponentRef> {
    match granularity {
        Granularity::Component => component_candidates(cfg),
        Granularity::Token => (0..seq_len)
            .filter(|&i| i != spec.position)
            .map(ComponentRef::token)
            .collect(),
    }
}

/// Indices of `candidates` ordered by descending score; ties broken by
/// (layer, index) ascending.
fn ranked_order(candidates: &[ComponentRef], ranking: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        ranking[b]
            .partial_cmp(&ranking[a])
            .expect("finite scores")
            .then_with(|| {
                let ca = &candidates[a];
                let cb = &candidates[b];
                (ca.layer, ca.index, ca.kind as u8).cmp(&(cb.layer, cb.index, cb.kind as u8))
            })
    });
    order
}

fn ablation_probability(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    tokens: &[usize],
    spec: &TargetSpec,
    ablated: &[&ComponentRef],
    token_mode: TokenAblation,
) -> Result<f64> {
    let removing_tokens = token_mode == TokenAblation::Remove
        && ablated.iter().any(|c| c.kind == ComponentKind::Token);
    if removing_tokens {
        let drop: std::collections::HashSet<usize> = ablated
            .iter()
            .filter(|c| c.kind == ComponentKind::Token)
            .map(|c| c.index)
            .collect();
        let mut kept = Vec::with_capacity(tokens.len());
        let mut new_pos = None;
        for (i, &tok) in tokens.iter().enumerate() {
            if drop.contains(&i) {
                continue;
            }
            if i == spec.position {
                new_pos = Some(kept.len());
            }
            kept.push(tok);
        }
        let position = new_pos.expect("attribution position is never a candidate");
        let mut edits = ForwardEdits::none();
        for c in ablated {
            match c.kind {
                ComponentKind::Head => edits.zero_heads.push((c.layer, c.index)),
                ComponentKind::Neuron => edits.zero_neurons.push((c.layer, c.index)),
                ComponentKind::Token => {}
            }
        }
        let logits = forward_logits(&kept, weights, cfg, &edits)?;
        return Ok(target_probability(
            &logits,
            &TargetSpec {
                token: spec.token,
                position,
            },
        ));
    }

    let mut edits = ForwardEdits::none();
    for c in ablated {
        match c.kind {
            ComponentKind::Head => edits.zero_heads.push((c.layer, c.index)),
            ComponentKind::Neuron => edits.zero_neurons.push((c.layer, c.index)),
            ComponentKind::Token => edits.zero_embeddings.push(c.index),
        }
    }
    let logits = forward_logits(tokens, weights, cfg, &edits)?;
    Ok(target_probability(&logits, spec))
}

/// Run one faithfulness curve: for each fraction in the grid, ablate the
/// top-k set (disruption) or its complement (recovery) and record the
/// retained probability ratio.
pub fn run_curve(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    tokens: &[usize],
    spec: &TargetSpec,
    ranking: &[f64],
    abl: &AblationSpec,
) -> Result<FaithfulnessCurve> {
    let pool = candidates(cfg, tokens.len(), spec, abl.granularity);
    if ranking.len() != pool.len() {
        return Err(DpaError::InvalidArgument(format!(
            "ranking has {} scores for {} candidates",
            ranking.len(),
            pool.len()
        )));
    }
    if pool.is_empty() {
        return Err(DpaError::InvalidArgument("empty candidate pool".into()));
    }
    let order = ranked_order(&pool, ranking);
    let clean = forward_logits(tokens, weights, cfg, &ForwardEdits::none())?;
    let p_clean = target_probability(&clean, spec);

    let n = pool.len();
    let mut points = Vec::with_capacity(abl.k_grid.len());
    for &k in &abl.k_grid {
        let m = ((k * n as f64 + 1e-9).floor() as usize).min(n);
        let ablated: Vec<&ComponentRef> = match abl.mode {
            CurveMode::Disruption => order[..m].iter().map(|&i| &pool[i]).collect(),
            CurveMode::Recovery => order[m..].iter().map(|&i| &pool[i]).collect(),
        };
        let p_abl = if ablated.is_empty() {
            p_clean
        } else {
            ablation_probability(weights, cfg, tokens, spec, &ablated, abl.token_mode)?
        };
        points.push((k, retained_ratio(p_clean, p_abl)?));
    }
    let area = auc(&points);
    Ok(FaithfulnessCurve { points, auc: area })
}

/// Table-style aggregate: recovery AUC minus disruption AUC.
pub fn total_score(disruption_auc: f64, recovery_auc: f64) -> f64 {
    recovery_auc - disruption_auc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::random_scores;
    use crate::stats;
    use crate::zoo;

    #[test]
    fn retained_ratio_examples() {
        assert_eq!(retained_ratio(0.4, 0.4).unwrap(), 1.0);
        assert_eq!(retained_ratio(0.4, 0.0).unwrap(), 0.0);
        assert!((retained_ratio(0.8, 0.6).unwrap() - 0.75).abs() < 1e-15);
        assert!(retained_ratio(0.0, 0.1).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[(0.0, 1.0), (0.5, 1.0), (1.0, 1.0)]), 1.0);
        assert_eq!(auc(&[(0.0, 1.0), (1.0, 0.0)]), 0.5);
        assert!((auc(&[(0.0, 1.0), (0.5, 0.5), (1.0, 0.5)]) - 0.625).abs() < 1e-15);
    }

    #[test]
    fn auc_monotone_under_pointwise_dominance() {
        let lo = [(0.0, 0.2), (0.5, 0.4), (1.0, 0.1)];
        let hi = [(0.0, 0.3), (0.5, 0.4), (1.0, 0.5)];
        assert!(auc(&hi) >= auc(&lo));
    }

    #[test]
    fn ablation_spec_validates_grid() {
        assert!(AblationSpec::new(
            Granularity::Component,
            CurveMode::Disruption,
            TokenAblation::ZeroEmbed,
            vec![0.1, 0.1],
        )
        .is_err());
        assert!(AblationSpec::new(
            Granularity::Component,
            CurveMode::Disruption,
            TokenAblation::ZeroEmbed,
            vec![0.1, 1.5],
        )
        .is_err());
        assert!(AblationSpec::new(
            Granularity::Component,
            CurveMode::Disruption,
            TokenAblation::ZeroEmbed,
            vec![],
        )
        .is_err());
    }

    #[test]
    fn zero_fraction_disruption_is_clean() {
        let cfg = zoo::default_config(zoo::CircuitKind::Random);
        let w = zoo::build_random(&cfg, 3).unwrap();
        let tokens = vec![1, 5, 2, 9];
        let spec = TargetSpec { token: 4, position: 3 };
        let n = component_candidates(&cfg).len();
        let ranking = random_scores(n, 0);
        let abl = AblationSpec::new(
            Granularity::Component,
            CurveMode::Disruption,
            TokenAblation::ZeroEmbed,
            vec![0.0, 0.5],
        )
        .unwrap();
        let curve = run_curve(&w, &cfg, &tokens, &spec, &ranking, &abl).unwrap();
        assert_eq!(curve.points[0].1, 1.0);
    }

    #[test]
    fn full_fraction_recovery_is_clean() {
        let cfg = zoo::default_config(zoo::CircuitKind::Random);
        let w = zoo::build_random(&cfg, 4).unwrap();
        let tokens = vec![2, 7, 1];
        let spec = TargetSpec { token: 0, position: 2 };
        let n = component_candidates(&cfg).len();
        let ranking = random_scores(n, 1);
        let abl = AblationSpec::new(
            Granularity::Component,
            CurveMode::Recovery,
            TokenAblation::ZeroEmbed,
            vec![0.5, 1.0],
        )
        .unwrap();
        let curve = run_curve(&w, &cfg, &tokens, &spec, &ranking, &abl).unwrap();
        assert_eq!(curve.points[1].1, 1.0);
    }

    #[test]
    fn disruption_and_recovery_ablate_complementary_sets() {
        // at any k, recovery keeps exactly what disruption ablates, so the
        // two retained ratios coincide when the ranking is reversed
        let cfg = zoo::default_config(zoo::CircuitKind::Random);
        let w = zoo::build_random(&cfg, 5).unwrap();
        let tokens = vec![3, 8, 1, 6];
        let spec = TargetSpec { token: 2, position: 3 };
        let n = component_candidates(&cfg).len();
        let ranking = random_scores(n, 2);
        // strict ranking: no ties, so complement sets are exact
        let k = 10.0 / n as f64;
        let dis = AblationSpec::new(
            Granularity::Component,
            CurveMode::Disruption,
            TokenAblation::ZeroEmbed,
            vec![k],
        )
        .unwrap();
        let dis_curve = run_curve(&w, &cfg, &tokens, &spec, &ranking, &dis).unwrap();
        // recovery with the reversed ranking at complement fraction
        let reversed: Vec<f64> = ranking.iter().map(|v| -v).collect();
        let k_comp = (n - 10) as f64 / n as f64;
        let rec = AblationSpec::new(
            Granularity::Component,
            CurveMode::Recovery,
            TokenAblation::ZeroEmbed,
            vec![k_comp],
        )
        .unwrap();
        let rec_curve = run_curve(&w, &cfg, &tokens, &spec, &reversed, &rec).unwrap();
        assert!((dis_curve.points[0].1 - rec_curve.points[0].1).abs() < 1e-12);
    }

    #[test]
    fn token_remove_mode_matches_shorter_sequence() {
        let cfg = zoo::default_config(zoo::CircuitKind::Random);
        let w = zoo::build_random(&cfg, 6).unwrap();
        let tokens = vec![3, 8, 1, 6];
        let spec = TargetSpec { token: 2, position: 3 };
        // rank position 1 on top, everything else below
        let pool = candidates(&cfg, tokens.len(), &spec, Granularity::Token);
        let ranking: Vec<f64> = pool
            .iter()
            .map(|c| if c.index == 1 { 1.0 } else { 0.0 })
            .collect();
        let abl = AblationSpec::new(
            Granularity::Token,
            CurveMode::Disruption,
            TokenAblation::Remove,
            vec![1.0 / 3.0],
        )
        .unwrap();
        let curve = run_curve(&w, &cfg, &tokens, &spec, &ranking, &abl).unwrap();
        let direct = forward_logits(&[3, 1, 6], &w, &cfg, &ForwardEdits::none()).unwrap();
        let p = target_probability(&direct, &TargetSpec { token: 2, position: 2 });
        let clean = forward_logits(&tokens, &w, &cfg, &ForwardEdits::none()).unwrap();
        let p_clean = target_probability(&clean, &spec);
        assert!((curve.points[0].1 - p / p_clean).abs() < 1e-12);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            // trapezoid area sits between the extreme curve values
            #[test]
            fn auc_bounded_by_curve_extremes(
                ys in proptest::collection::vec(0.0f64..2.0, 2..10),
            ) {
                let n = ys.len();
                let points: Vec<(f64, f64)> = ys
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| (i as f64 / (n - 1) as f64, y))
                    .collect();
                let a = auc(&points);
                let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = ys.iter().cloned().fold(0.0f64, f64::max);
                prop_assert!(a >= lo - 1e-12 && a <= hi + 1e-12);
            }

            // pointwise dominance implies auc dominance
            #[test]
            fn auc_monotone_under_dominance(
                base in proptest::collection::vec(0.0f64..1.0, 2..10),
                bumps in proptest::collection::vec(0.0f64..1.0, 2..10),
            ) {
                let n = base.len().min(bumps.len());
                let lo: Vec<(f64, f64)> = (0..n)
                    .map(|i| (i as f64 / (n - 1) as f64, base[i]))
                    .collect();
                let hi: Vec<(f64, f64)> = (0..n)
                    .map(|i| (lo[i].0, base[i] + bumps[i]))
                    .collect();
                prop_assert!(auc(&hi) >= auc(&lo) - 1e-12);
            }
        }
    }

    #[test]
    fn oracle_ranking_disrupts_at_least_as_fast_as_random() {
        // exact patching deltas, ranked descending, knock the planted
        // circuit out no later than random rankings do, at every k
        use crate::baselines::activation_patch;
        use crate::zoo::CircuitKind;
        let cfg = zoo::default_config(CircuitKind::Induction);
        let m = zoo::build_induction(&cfg).unwrap();
        let spec = TargetSpec { token: m.demo_target, position: m.demo_position };
        let pool = component_candidates(&cfg);
        let oracle: Vec<f64> = pool
            .iter()
            .map(|c| activation_patch(&m.weights, &cfg, &m.demo_tokens, c, &spec).unwrap())
            .collect();
        let grid: Vec<f64> = (1..=pool.len()).map(|i| i as f64 / pool.len() as f64).collect();
        let abl = AblationSpec::new(
            Granularity::Component,
            CurveMode::Disruption,
            TokenAblation::ZeroEmbed,
            grid.clone(),
        )
        .unwrap();
        let oracle_curve =
            run_curve(&m.weights, &cfg, &m.demo_tokens, &spec, &oracle, &abl).unwrap();
        // expectation over random rankings
        let n_seeds = 20;
        let mut random_mean = vec![0.0; grid.len()];
        for seed in 0..n_seeds {
            let ranking = random_scores(pool.len(), 900 + seed);
            let curve =
                run_curve(&m.weights, &cfg, &m.demo_tokens, &spec, &ranking, &abl).unwrap();
            for (acc, &(_, y)) in random_mean.iter_mut().zip(curve.points.iter()) {
                *acc += y / n_seeds as f64;
            }
        }
        for (i, &(_, oracle_y)) in oracle_curve.points.iter().enumerate() {
            assert!(
                oracle_y <= random_mean[i] + 1e-9,
                "k index {i}: oracle {oracle_y} vs random mean {}",
                random_mean[i]
            );
        }
    }

    #[test]
    fn random_ranking_disruption_matches_recovery_in_expectation() {
        // with a symmetric k grid, the expected ablated-set size of the
        // disruption curve at k equals recovery's at 1-k, so the mean AUCs
        // agree over random rankings; Monte-Carlo over 60 seeds, 2 sigma
        let cfg = zoo::default_config(zoo::CircuitKind::Random);
        let w = zoo::build_random(&cfg, 7).unwrap();
        let tokens = vec![4, 9, 2, 11, 5];
        let spec = TargetSpec { token: 3, position: 4 };
        let n = component_candidates(&cfg).len();
        let grid = vec![0.0, 0.25, 0.5, 0.75, 1.0];
        let mut dis_aucs = Vec::new();
        let mut rec_aucs = Vec::new();
        for seed in 0..60 {
            let ranking = random_scores(n, seed);
            let dis = AblationSpec::new(
                Granularity::Component,
                CurveMode::Disruption,
                TokenAblation::ZeroEmbed,
                grid.clone(),
            )
            .unwrap();
            let rec = AblationSpec::new(
                Granularity::Component,
                CurveMode::Recovery,
                TokenAblation::ZeroEmbed,
                grid.clone(),
            )
            .unwrap();
            dis_aucs.push(run_curve(&w, &cfg, &tokens, &spec, &ranking, &dis).unwrap().auc);
            rec_aucs.push(run_curve(&w, &cfg, &tokens, &spec, &ranking, &rec).unwrap().auc);
        }
        let md = stats::mean(&dis_aucs);
        let mr = stats::mean(&rec_aucs);
        let se = (stats::std_dev(&dis_aucs).powi(2) / dis_aucs.len() as f64
            + stats::std_dev(&rec_aucs).powi(2) / rec_aucs.len() as f64)
            .sqrt();
        assert!(
            (md - mr).abs() <= 2.0 * se.max(1e-6),
            "disruption mean {md} vs recovery mean {mr} (se {se})"
        );
    }
}
