//! JSON report document, schema "dpa-report/1".

use serde::{Deserialize, Serialize};

use dpa_core::faithfulness::FaithfulnessCurve;
use dpa_core::model::ModelConfig;

pub const SCHEMA: &str = "dpa-report/1";

#[derive(Debug, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub command: String,
    pub model: ModelDescription,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetInfo>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path_weights: Option<PathWeightsInfo>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token_scores: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_scores: Option<ScoreTable>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub neuron_scores: Option<ScoreTable>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub faithfulness: Option<FaithfulnessReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchReport>,
}

impl Report {
    pub fn new(command: &str, model: ModelDescription) -> Self {
        Self {
            schema: SCHEMA.to_string(),
            command: command.to_string(),
            model,
            target: None,
            path_weights: None,
            tokens: None,
            token_scores: None,
            head_scores: None,
            neuron_scores: None,
            faithfulness: None,
            bench: None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelDescription {
    pub path: String,
    pub config: ModelConfig,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TargetInfo {
    pub token: usize,
    pub position: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PathWeightsInfo {
    pub mu_q: f64,
    pub mu_k: f64,
    pub mu_v: f64,
    pub mu_gate: f64,
    pub mu_up: f64,
}

impl From<dpa_core::PathWeights> for PathWeightsInfo {
    fn from(p: dpa_core::PathWeights) -> Self {
        Self {
            mu_q: p.mu_q,
            mu_k: p.mu_k,
            mu_v: p.mu_v,
            mu_gate: p.mu_gate,
            mu_up: p.mu_up,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub layer: usize,
    pub index: usize,
    pub score: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreTable {
    /// Top entries by descending score.
    pub top: Vec<ScoreEntry>,
    /// Full layer-major score matrix, when requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub full: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InstanceCurves {
    pub tokens: Vec<usize>,
    pub target: usize,
    pub position: usize,
    pub disruption: FaithfulnessCurve,
    pub recovery: FaithfulnessCurve,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub method: String,
    pub granularity: String,
    pub token_mode: String,
    pub k_grid: Vec<f64>,
    pub instances: Vec<InstanceCurves>,
    pub summary: FaithfulnessSummary,
}

/// AUC summary on a 0-100 point scale.
#[derive(Debug, Serialize, Deserialize)]
pub struct FaithfulnessSummary {
    pub mean_disruption_curve: Vec<(f64, f64)>,
    pub mean_recovery_curve: Vec<(f64, f64)>,
    pub disruption_auc_points: f64,
    pub recovery_auc_points: f64,
    pub total_points: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BenchRow {
    pub components: usize,
    pub dpa_seconds: f64,
    pub ap_seconds: f64,
    pub ap_forwards_equivalent: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub repeats: usize,
    pub single_forward_seconds: f64,
    pub rows: Vec<BenchRow>,
    /// DPA time at the largest component count over the smallest.
    pub dpa_all_over_one_ratio: f64,
    /// Fitted marginal cost of activation patching, in units of one
    /// forward pass per component.
    pub ap_slope_forwards_per_component: f64,
}
