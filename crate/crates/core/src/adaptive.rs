//! Adaptive adversary that recovers a training ratio through a membership
//! oracle instead of shadow models.
//!
//! The adversary plants `m` candidate rows of each attribute value in the
//! victim's data pool. The victim subsamples to its target ratio α, so the
//! in-demand attribute keeps all its candidates while the other survives at
//! the relative rate α/(1−α) (or its reciprocal). A membership oracle with
//! true-positive rate β and false-positive rate `fpr` then reports how many
//! candidates of each attribute made it into training; the ratio estimate is
//! the detected attribute-1 share. β scales both detection counts equally,
//! so with `fpr = 0` it cancels from the estimate exactly.
//!
//! [`OracleMode::Expectation`] propagates expected counts (noise-free);
//! [`OracleMode::Binomial`] draws the survival and detection counts, so the
//! estimate concentrates as m grows.

use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, MetricError};
use crate::seed;

/// Decision margin around 0.5 separating "balanced" from "skewed".
pub const DEFAULT_DECISION_TAU: f64 = 0.03;

/// Slack for boundary comparisons so decimal inputs like 0.53 sit on the
/// boundary they were written to express.
const BOUNDARY_EPS: f64 = 1e-9;

/// Errors from the adaptive-attack simulation.
#[derive(Debug, Error)]
pub enum AdaptiveError {
    #[error("candidate count m must be at least 1")]
    InvalidCandidateCount,
    #[error("alpha {0} must lie strictly inside (0, 1)")]
    DegenerateAlpha(f64),
    #[error("beta {0} outside half-open interval (0, 1]")]
    InvalidBeta(f64),
    #[error("false-positive rate {0} outside [0, 1)")]
    InvalidFpr(f64),
    #[error("tau {0} outside [0, 0.5)")]
    InvalidTau(f64),
    #[error("survival counts must be finite and non-negative, got {0}")]
    InvalidCount(f64),
    #[error("no candidates survived; the ratio estimate is undefined")]
    ZeroSurvivors,
    #[error("alpha grid is empty")]
    EmptyGrid,
    #[error("trials must be at least 1")]
    ZeroTrials,
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// How oracle responses are generated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    /// Expected counts, no sampling noise.
    Expectation,
    /// Binomial draws for survival, detection, and false positives.
    Binomial,
}

impl std::fmt::Display for OracleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OracleMode::Expectation => "expectation",
            OracleMode::Binomial => "binomial",
        })
    }
}

/// Membership oracle the adaptive adversary queries.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MembershipOracleSpec {
    /// True-positive rate: chance a training member is detected.
    pub beta: f64,
    /// False-positive rate: chance a non-member is reported anyway.
    pub fpr: f64,
    pub mode: OracleMode,
    /// Seeds binomial draws; ignored in expectation mode.
    pub seed: u64,
}

impl MembershipOracleSpec {
    pub fn validate(&self) -> Result<(), AdaptiveError> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(AdaptiveError::InvalidBeta(self.beta));
        }
        if !(0.0..1.0).contains(&self.fpr) {
            return Err(AdaptiveError::InvalidFpr(self.fpr));
        }
        Ok(())
    }
}

/// Oracle-detected survivor counts per candidate attribute.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSurvival {
    /// Detected survivors among the m attribute-0 candidates.
    pub m_minus: f64,
    /// Detected survivors among the m attribute-1 candidates.
    pub m_plus: f64,
}

/// Plants m candidates of each attribute and reports how many the oracle
/// sees inside the victim's training set at ratio `alpha`.
pub fn simulate_survival(
    m: u64,
    alpha: f64,
    oracle: &MembershipOracleSpec,
) -> Result<AttributeSurvival, AdaptiveError> {
    if m == 0 {
        return Err(AdaptiveError::InvalidCandidateCount);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(AdaptiveError::DegenerateAlpha(alpha));
    }
    oracle.validate()?;
    let retain1 = (alpha / (1.0 - alpha)).min(1.0);
    let retain0 = ((1.0 - alpha) / alpha).min(1.0);
    match oracle.mode {
        OracleMode::Expectation => {
            let detected = |retain: f64| {
                m as f64 * (retain * oracle.beta + (1.0 - retain) * oracle.fpr)
            };
            Ok(AttributeSurvival { m_minus: detected(retain0), m_plus: detected(retain1) })
        }
        OracleMode::Binomial => {
            let mut rng = seed::rng(oracle.seed);
            let mut detected = |retain: f64| {
                let survivors = Binomial::new(m, retain).unwrap().sample(&mut rng);
                let hits = Binomial::new(survivors, oracle.beta).unwrap().sample(&mut rng);
                let ghosts = Binomial::new(m - survivors, oracle.fpr).unwrap().sample(&mut rng);
                (hits + ghosts) as f64
            };
            // Fixed draw order: attribute 0, then attribute 1.
            let m_minus = detected(retain0);
            let m_plus = detected(retain1);
            Ok(AttributeSurvival { m_minus, m_plus })
        }
    }
}

/// Ratio estimate from detected survivor counts: the attribute-1 share.
pub fn estimate_alpha(m_minus: f64, m_plus: f64) -> Result<f64, AdaptiveError> {
    for count in [m_minus, m_plus] {
        if !count.is_finite() || count < 0.0 {
            return Err(AdaptiveError::InvalidCount(count));
        }
    }
    let total = m_minus + m_plus;
    if total <= 0.0 {
        return Err(AdaptiveError::ZeroSurvivors);
    }
    Ok(m_plus / total)
}

/// Binary call about the victim's distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    /// Ratio reads as balanced (within tau of 0.5).
    G0,
    /// Ratio reads as skewed.
    G1,
}

impl Decision {
    pub fn as_bit(self) -> u8 {
        match self {
            Decision::G0 => 0,
            Decision::G1 => 1,
        }
    }
}

/// G1 exactly when the estimate strictly exceeds the tau-band around 0.5.
pub fn binary_decision(alpha_hat: f64, tau: f64) -> Result<Decision, AdaptiveError> {
    if !(0.0..0.5).contains(&tau) {
        return Err(AdaptiveError::InvalidTau(tau));
    }
    if (alpha_hat - 0.5).abs() > tau + BOUNDARY_EPS {
        Ok(Decision::G1)
    } else {
        Ok(Decision::G0)
    }
}

/// One simulated trial in a campaign.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CampaignRow {
    pub alpha: f64,
    pub m: u64,
    pub beta: f64,
    pub fpr: f64,
    pub mode: OracleMode,
    pub trial: usize,
    pub alpha_hat: f64,
    pub decision: Decision,
}

/// Campaign aggregates across an alpha grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CampaignResult {
    pub rows: Vec<CampaignRow>,
    /// Mean squared error of the ratio estimate across all rows.
    pub mse: f64,
    /// Mean over the grid of α(1−α)/mse_α; infinite when a noise-free mode
    /// drives a per-α mse to zero.
    pub nleaked_regression: f64,
    /// Fraction of trials whose binary decision matches the ground truth
    /// under [`DEFAULT_DECISION_TAU`].
    pub binary_accuracy: f64,
}

/// Runs `trials` independent oracle simulations per grid ratio. Each
/// (ratio, trial) cell derives its own oracle seed, so results are
/// independent of execution order.
pub fn adaptive_campaign(
    victim_alphas: &[f64],
    m: u64,
    oracle: &MembershipOracleSpec,
    trials: usize,
) -> Result<CampaignResult, AdaptiveError> {
    if victim_alphas.is_empty() {
        return Err(AdaptiveError::EmptyGrid);
    }
    if trials == 0 {
        return Err(AdaptiveError::ZeroTrials);
    }
    oracle.validate()?;
    let mut rows = Vec::with_capacity(victim_alphas.len() * trials);
    let mut per_alpha_nleaked = Vec::with_capacity(victim_alphas.len());
    let mut total_sq_err = 0.0;
    let mut correct = 0usize;
    for (ai, &alpha) in victim_alphas.iter().enumerate() {
        let truth = if (alpha - 0.5).abs() > DEFAULT_DECISION_TAU + BOUNDARY_EPS {
            Decision::G1
        } else {
            Decision::G0
        };
        let mut alpha_sq_err = 0.0;
        for trial in 0..trials {
            let mut trial_oracle = *oracle;
            trial_oracle.seed =
                seed::derive(oracle.seed, seed::Stream::Campaign, &[ai as u64, trial as u64]);
            let survival = simulate_survival(m, alpha, &trial_oracle)?;
            let alpha_hat = estimate_alpha(survival.m_minus, survival.m_plus)?;
            let decision = binary_decision(alpha_hat, DEFAULT_DECISION_TAU)?;
            alpha_sq_err += (alpha_hat - alpha) * (alpha_hat - alpha);
            correct += usize::from(decision == truth);
            rows.push(CampaignRow {
                alpha,
                m,
                beta: oracle.beta,
                fpr: oracle.fpr,
                mode: oracle.mode,
                trial,
                alpha_hat,
                decision,
            });
        }
        total_sq_err += alpha_sq_err;
        let mse_alpha = alpha_sq_err / trials as f64;
        per_alpha_nleaked.push(if mse_alpha > 0.0 {
            metrics::nleaked_regression(mse_alpha, alpha)?
        } else {
            f64::INFINITY
        });
    }
    Ok(CampaignResult {
        mse: total_sq_err / rows.len() as f64,
        nleaked_regression: metrics::mean_over_grid(&per_alpha_nleaked)?,
        binary_accuracy: correct as f64 / rows.len() as f64,
        rows,
    })
}
