//! Leakage metrics and fairness accounting.
//!
//! [`nleaked_binary`] converts a distinguishing accuracy ω between two
//! candidate ratios (α0, α1) into the equivalent number of training rows an
//! adversary would need to see directly:
//!
//! n = ln(4ω(1−ω)) / ln(max(lo/hi, (1−hi)/(1−lo)))
//!
//! with lo/hi the smaller/larger ratio. Accuracy at or below coin-flip maps
//! to zero; perfect accuracy is capped just below 1 and flagged, keeping the
//! value finite. [`nleaked_regression`] is the regression analogue
//! α(1−α)/mse. [`fairness_impact`] compares per-group precision and recall
//! between a baseline fleet and a defense-trained fleet.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::DatasetTable;
use crate::models::{self, ModelError, TrainedModel};

/// Highest accuracy admitted into the leakage formula; anything above is
/// clamped here and flagged as saturated.
pub const OMEGA_CAP: f64 = 1.0 - 1e-6;

/// Errors from metric computation.
#[derive(Debug, Error)]
pub enum MetricError {
    #[error("accuracy {0} outside [0, 1]")]
    InvalidOmega(f64),
    #[error("alpha {0} outside [0, 1]")]
    InvalidAlpha(f64),
    #[error("candidate ratios must differ")]
    EqualAlphas,
    #[error("ratio pair (0, 1) is degenerate: one observation reveals the distribution")]
    DegenerateAlphaPair,
    #[error("mse {0} must be positive and finite")]
    InvalidMse(f64),
    #[error("input must be non-empty")]
    EmptyInput,
    #[error("evaluation data has no rows with property attribute {0}")]
    MissingGroup(u8),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A leakage value plus a flag recording that the accuracy hit the cap.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NLeaked {
    pub value: f64,
    pub saturated: bool,
}

/// Effective number of leaked training rows for a binary distinguishing
/// accuracy `omega` between ratios `alpha0` and `alpha1`.
pub fn nleaked_binary(omega: f64, alpha0: f64, alpha1: f64) -> Result<NLeaked, MetricError> {
    if !(0.0..=1.0).contains(&omega) || !omega.is_finite() {
        return Err(MetricError::InvalidOmega(omega));
    }
    for alpha in [alpha0, alpha1] {
        if !(0.0..=1.0).contains(&alpha) || !alpha.is_finite() {
            return Err(MetricError::InvalidAlpha(alpha));
        }
    }
    if alpha0 == alpha1 {
        return Err(MetricError::EqualAlphas);
    }
    let lo = alpha0.min(alpha1);
    let hi = alpha0.max(alpha1);
    let ratio = (lo / hi).max((1.0 - hi) / (1.0 - lo));
    if ratio <= 0.0 {
        return Err(MetricError::DegenerateAlphaPair);
    }
    if omega <= 0.5 {
        return Ok(NLeaked { value: 0.0, saturated: false });
    }
    let saturated = omega > OMEGA_CAP;
    let w = omega.min(OMEGA_CAP);
    Ok(NLeaked { value: (4.0 * w * (1.0 - w)).ln() / ratio.ln(), saturated })
}

/// Regression analogue: leaked rows implied by a mean squared error on the
/// ratio estimate at true ratio `alpha`.
pub fn nleaked_regression(mse: f64, alpha: f64) -> Result<f64, MetricError> {
    if !(mse > 0.0) || !mse.is_finite() {
        return Err(MetricError::InvalidMse(mse));
    }
    if !(0.0..=1.0).contains(&alpha) || !alpha.is_finite() {
        return Err(MetricError::InvalidAlpha(alpha));
    }
    Ok(alpha * (1.0 - alpha) / mse)
}

/// Mean of per-ratio metric values across a grid.
pub fn mean_over_grid(values: &[f64]) -> Result<f64, MetricError> {
    if values.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Median; the even case averages the two central values.
pub fn median(values: &[f64]) -> Result<f64, MetricError> {
    if values.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    Ok(if sorted.len() % 2 == 1 { sorted[mid] } else { (sorted[mid - 1] + sorted[mid]) / 2.0 })
}

/// Precision/recall deltas for one property group.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GroupFairness {
    pub group: u8,
    pub baseline_precision: Option<f64>,
    pub defended_precision: Option<f64>,
    /// Relative precision change in percent; None when undefined.
    pub precision_change_pct: Option<f64>,
    pub baseline_recall: Option<f64>,
    pub defended_recall: Option<f64>,
    pub recall_change_pct: Option<f64>,
    /// Set when any fleet member had an undefined precision or recall on
    /// this group (no positive predictions / no positive labels).
    pub undefined_encountered: bool,
}

/// Per-group fairness comparison between two fleets.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FairnessReport {
    pub groups: Vec<GroupFairness>,
}

struct FleetGroupStats {
    mean_precision: Option<f64>,
    mean_recall: Option<f64>,
    undefined: bool,
}

fn fleet_group_stats(
    fleet: &[TrainedModel],
    eval_data: &DatasetTable,
    group: u8,
) -> Result<FleetGroupStats, MetricError> {
    let rows: Vec<usize> =
        (0..eval_data.len()).filter(|&i| eval_data.property_attrs[i] == group).collect();
    if rows.is_empty() {
        return Err(MetricError::MissingGroup(group));
    }
    let mut precisions = Vec::new();
    let mut recalls = Vec::new();
    let mut undefined = false;
    for model in fleet {
        let labels = models::predict_labels(model, &eval_data.features)?;
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for &i in &rows {
            match (labels[i], eval_data.task_labels[i]) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fn_ += 1,
                _ => {}
            }
        }
        if tp + fp > 0 {
            precisions.push(tp as f64 / (tp + fp) as f64);
        } else {
            undefined = true;
        }
        if tp + fn_ > 0 {
            recalls.push(tp as f64 / (tp + fn_) as f64);
        } else {
            undefined = true;
        }
    }
    let mean = |xs: &[f64]| {
        if xs.is_empty() { None } else { Some(xs.iter().sum::<f64>() / xs.len() as f64) }
    };
    Ok(FleetGroupStats {
        mean_precision: mean(&precisions),
        mean_recall: mean(&recalls),
        undefined,
    })
}

fn relative_change_pct(baseline: Option<f64>, defended: Option<f64>) -> Option<f64> {
    match (baseline, defended) {
        (Some(b), Some(d)) if b > 0.0 => Some(100.0 * (d - b) / b),
        _ => None,
    }
}

/// Compares mean per-group precision and recall of a defense-trained fleet
/// against a baseline fleet on shared evaluation data. Undefined metrics
/// (a model that never predicts positive, or a group without positive
/// labels) are flagged per group instead of failing the comparison.
pub fn fairness_impact(
    baseline_fleet: &[TrainedModel],
    defended_fleet: &[TrainedModel],
    eval_data: &DatasetTable,
) -> Result<FairnessReport, MetricError> {
    if baseline_fleet.is_empty() || defended_fleet.is_empty() || eval_data.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut groups = Vec::with_capacity(2);
    for group in [0u8, 1u8] {
        let base = fleet_group_stats(baseline_fleet, eval_data, group)?;
        let def = fleet_group_stats(defended_fleet, eval_data, group)?;
        groups.push(GroupFairness {
            group,
            baseline_precision: base.mean_precision,
            defended_precision: def.mean_precision,
            precision_change_pct: relative_change_pct(base.mean_precision, def.mean_precision),
            baseline_recall: base.mean_recall,
            defended_recall: def.mean_recall,
            recall_change_pct: relative_change_pct(base.mean_recall, def.mean_recall),
            undefined_encountered: base.undefined || def.undefined,
        });
    }
    Ok(FairnessReport { groups })
}
