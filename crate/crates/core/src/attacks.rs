//! Black-box attacks that decide which of two candidate training ratios a
//! victim model was trained under.
//!
//! Each attack consumes shadow models trained by the adversary at the two
//! candidate ratios (G0 at α0, G1 at α1) and emits an [`AttackVerdict`] per
//! victim: a predicted bit (1 ⇒ trained at α1) plus a signed score whose
//! positive direction always points at G1.
//!
//! Three attacks are implemented:
//! - KL: compares victims to shadow pairs through KL divergence between
//!   prediction vectors on a shared query bundle ([`kl_attack`]);
//! - threshold test: places a decision threshold between the two banks'
//!   task accuracies ([`threshold_test`], [`fit_threshold`]);
//! - ZTO: trains a meta-classifier on flattened shadow prediction matrices
//!   ([`zto_attack`], [`fit_zto_meta`]).
//!
//! Label-only access is modeled by [`label_only_transform`] (hard labels,
//! softened to (ε, 1−ε)) and [`neighborhood_confidence`] (majority vote over
//! Gaussian-perturbed copies of each query point).

use rand::seq::index::sample as index_sample;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::models::{self, ModelError, ModelSpec, PredictionMatrix, TrainedModel};
use crate::seed;

/// Probability clamp applied before every KL evaluation.
pub const DEFAULT_PROB_FLOOR: f64 = 1e-6;

/// Errors from attack construction and evaluation.
#[derive(Debug, Error)]
pub enum AttackError {
    #[error("shadow bank side is empty")]
    EmptyBank,
    #[error("victim list is empty")]
    EmptyVictims,
    #[error("probability floor {0} outside open interval (0, 0.5)")]
    InvalidFloor(f64),
    #[error("pair fraction {0} outside half-open interval (0, 1]")]
    InvalidPairFraction(f64),
    #[error("epsilon {0} outside open interval (0, 0.5)")]
    InvalidEpsilon(f64),
    #[error("neighborhood size k must be at least 1")]
    InvalidNeighborCount,
    #[error("noise sigma {0} must be finite and non-negative")]
    InvalidNoise(f64),
    #[error("alpha {0} outside [0, 1]")]
    InvalidAlpha(f64),
    #[error("candidate ratios must differ")]
    EqualAlphas,
    #[error("prediction shape mismatch: expected {expected_rows}x{expected_cols}, got {rows}x{cols}")]
    ShapeMismatch { expected_rows: usize, expected_cols: usize, rows: usize, cols: usize },
    #[error("query halves differ in size: {left} vs {right}")]
    UnevenHalves { left: usize, right: usize },
    #[error("label at row {row} is {value}, expected 0 or 1")]
    NonBinaryLabel { row: usize, value: u8 },
    #[error("accuracy {0} is not finite")]
    NonFiniteAccuracy(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which distinguishing attack produced a verdict.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Kl,
    ThresholdTest,
    Zto,
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttackKind::Kl => "kl",
            AttackKind::ThresholdTest => "threshold_test",
            AttackKind::Zto => "zto",
        })
    }
}

/// One attack decision about one victim.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackVerdict {
    pub attack: AttackKind,
    /// 1 claims the victim trained at α1, 0 at α0.
    pub predicted_bit: u8,
    /// Signed evidence; positive points at α1.
    pub score: f64,
}

/// Shadow models trained by the adversary at the two candidate ratios.
#[derive(Clone, Debug)]
pub struct ShadowBank {
    pub models_g0: Vec<TrainedModel>,
    pub models_g1: Vec<TrainedModel>,
    pub alpha0: f64,
    pub alpha1: f64,
}

impl ShadowBank {
    pub fn new(
        models_g0: Vec<TrainedModel>,
        models_g1: Vec<TrainedModel>,
        alpha0: f64,
        alpha1: f64,
    ) -> Result<Self, AttackError> {
        if models_g0.is_empty() || models_g1.is_empty() {
            return Err(AttackError::EmptyBank);
        }
        for alpha in [alpha0, alpha1] {
            if !(0.0..=1.0).contains(&alpha) || !alpha.is_finite() {
                return Err(AttackError::InvalidAlpha(alpha));
            }
        }
        if alpha0 == alpha1 {
            return Err(AttackError::EqualAlphas);
        }
        Ok(ShadowBank { models_g0, models_g1, alpha0, alpha1 })
    }
}

/// Query points every model is interrogated on: an even mixture of rows
/// drawn from each candidate distribution.
#[derive(Clone, Debug)]
pub struct QueryBundle {
    pub features: Matrix,
    /// Where the bundle came from, for reporting.
    pub source: String,
}

impl QueryBundle {
    /// Stacks two equally sized halves, one per candidate distribution.
    pub fn from_halves(
        half_g0: &Matrix,
        half_g1: &Matrix,
        source: impl Into<String>,
    ) -> Result<Self, AttackError> {
        if half_g0.rows() != half_g1.rows() || half_g0.rows() == 0 {
            return Err(AttackError::UnevenHalves { left: half_g0.rows(), right: half_g1.rows() });
        }
        Ok(QueryBundle { features: Matrix::vstack(half_g0, half_g1), source: source.into() })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

fn check_same_shape(a: &PredictionMatrix, b: &PredictionMatrix) -> Result<(), AttackError> {
    if a.rows() != b.rows() || a.classes() != b.classes() {
        return Err(AttackError::ShapeMismatch {
            expected_rows: a.rows(),
            expected_cols: a.classes(),
            rows: b.rows(),
            cols: b.classes(),
        });
    }
    Ok(())
}

fn clamp_normalize(row: &[f64], floor: f64, out: &mut [f64]) {
    let mut sum = 0.0;
    for (o, &p) in out.iter_mut().zip(row.iter()) {
        let c = p.clamp(floor, 1.0 - floor);
        *o = c;
        sum += c;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Mean over query rows of KL(N‖M) between per-row class distributions,
/// with both rows clamped to `[floor, 1-floor]` and renormalized first.
pub fn kl_divergence_estimate(
    n_preds: &PredictionMatrix,
    m_preds: &PredictionMatrix,
    floor: f64,
) -> Result<f64, AttackError> {
    if !(floor > 0.0 && floor < 0.5) {
        return Err(AttackError::InvalidFloor(floor));
    }
    check_same_shape(n_preds, m_preds)?;
    let classes = n_preds.classes();
    let mut n_row = vec![0.0; classes];
    let mut m_row = vec![0.0; classes];
    let mut total = 0.0;
    for i in 0..n_preds.rows() {
        clamp_normalize(n_preds.row(i), floor, &mut n_row);
        clamp_normalize(m_preds.row(i), floor, &mut m_row);
        for c in 0..classes {
            total += n_row[c] * (n_row[c] / m_row[c]).ln();
        }
    }
    Ok(total / n_preds.rows() as f64)
}

/// Pairwise vote λ = E[KL(G0‖victim)] − E[KL(G1‖victim)]; positive values
/// say the victim sits closer to the G1 shadow.
pub fn weighted_vote(
    victim_preds: &PredictionMatrix,
    shadow_g0_preds: &PredictionMatrix,
    shadow_g1_preds: &PredictionMatrix,
) -> Result<f64, AttackError> {
    let toward_g0 = kl_divergence_estimate(shadow_g0_preds, victim_preds, DEFAULT_PROB_FLOOR)?;
    let toward_g1 = kl_divergence_estimate(shadow_g1_preds, victim_preds, DEFAULT_PROB_FLOOR)?;
    Ok(toward_g0 - toward_g1)
}

/// How pairwise votes are aggregated into one verdict.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteMode {
    /// Scale votes to unit variance, then sum. The mean is deliberately not
    /// subtracted: votes are already signed evidence and centering them
    /// would zero the aggregate by construction.
    Weighted,
    /// Majority of vote signs.
    Simple,
    /// Plain sum of raw votes — the literal double-sum decision rule.
    RawSum,
}

/// KL attack configuration.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct KlOptions {
    /// Fraction of shadow pairs kept, sampled without replacement.
    pub pair_fraction: f64,
    pub vote_mode: VoteMode,
    /// Score the reverse divergence KL(victim‖shadow) instead.
    pub flip_kl: bool,
    /// Probability clamp for every KL evaluation.
    pub prob_floor: f64,
    /// Seeds the pair subsample.
    pub seed: u64,
}

impl Default for KlOptions {
    fn default() -> Self {
        KlOptions {
            pair_fraction: 0.8,
            vote_mode: VoteMode::Weighted,
            flip_kl: false,
            prob_floor: DEFAULT_PROB_FLOOR,
            seed: 0,
        }
    }
}

/// KL distinguishing attack over all (G0, G1) shadow pairs.
///
/// Computes one divergence per shadow against the victim, forms the pairwise
/// votes a_i − b_j on a subsampled pair set, and aggregates per `vote_mode`.
pub fn kl_attack(
    victim_preds: &PredictionMatrix,
    g0_preds: &[PredictionMatrix],
    g1_preds: &[PredictionMatrix],
    opts: &KlOptions,
) -> Result<AttackVerdict, AttackError> {
    if g0_preds.is_empty() || g1_preds.is_empty() {
        return Err(AttackError::EmptyBank);
    }
    if !(opts.pair_fraction > 0.0 && opts.pair_fraction <= 1.0) {
        return Err(AttackError::InvalidPairFraction(opts.pair_fraction));
    }
    let divergence = |shadow: &PredictionMatrix| -> Result<f64, AttackError> {
        if opts.flip_kl {
            kl_divergence_estimate(victim_preds, shadow, opts.prob_floor)
        } else {
            kl_divergence_estimate(shadow, victim_preds, opts.prob_floor)
        }
    };
    let toward_g0: Vec<f64> = g0_preds.iter().map(divergence).collect::<Result<_, _>>()?;
    let toward_g1: Vec<f64> = g1_preds.iter().map(divergence).collect::<Result<_, _>>()?;

    let total_pairs = toward_g0.len() * toward_g1.len();
    let kept: Vec<usize> = if opts.pair_fraction < 1.0 {
        let keep = crate::datagen::round_half_up(opts.pair_fraction * total_pairs as f64)
            .clamp(1, total_pairs);
        let mut rng = seed::rng(opts.seed);
        let mut picked = index_sample(&mut rng, total_pairs, keep).into_vec();
        picked.sort_unstable();
        picked
    } else {
        (0..total_pairs).collect()
    };
    let votes: Vec<f64> = kept
        .iter()
        .map(|&p| toward_g0[p / toward_g1.len()] - toward_g1[p % toward_g1.len()])
        .collect();

    let (bit, score) = match opts.vote_mode {
        VoteMode::RawSum => {
            let sum: f64 = votes.iter().sum();
            (u8::from(sum > 0.0), sum)
        }
        VoteMode::Weighted => {
            let sum: f64 = votes.iter().sum();
            let mean = sum / votes.len() as f64;
            let var =
                votes.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / votes.len() as f64;
            let std = var.sqrt();
            let score = if votes.len() < 2 || std == 0.0 { sum } else { sum / std };
            (u8::from(score > 0.0), score)
        }
        VoteMode::Simple => {
            let positive = votes.iter().filter(|&&v| v > 0.0).count();
            let score = positive as f64 - votes.len() as f64 / 2.0;
            (u8::from(2 * positive > votes.len()), score)
        }
    };
    Ok(AttackVerdict { attack: AttackKind::Kl, predicted_bit: bit, score })
}

/// Decision rule fitted on shadow accuracies: a threshold and the side the
/// G1 bank lives on.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ThresholdRule {
    pub threshold: f64,
    /// True when G1 shadows sit at or above the threshold.
    pub g1_above: bool,
    /// Set when every shadow accuracy is identical; the rule then always
    /// answers bit 0 with score 0.
    pub degenerate: bool,
}

impl ThresholdRule {
    /// Classifies one victim accuracy.
    pub fn classify(&self, victim_accuracy: f64) -> AttackVerdict {
        if self.degenerate {
            return AttackVerdict { attack: AttackKind::ThresholdTest, predicted_bit: 0, score: 0.0 };
        }
        let (bit, score) = if self.g1_above {
            (u8::from(victim_accuracy >= self.threshold), victim_accuracy - self.threshold)
        } else {
            (u8::from(victim_accuracy < self.threshold), self.threshold - victim_accuracy)
        };
        AttackVerdict { attack: AttackKind::ThresholdTest, predicted_bit: bit, score }
    }
}

/// Linear search over midpoints of the pooled shadow accuracies, keeping the
/// (threshold, orientation) pair that best separates the banks. The
/// orientation suggested by the bank means is tried first, so exact ties
/// resolve toward it.
pub fn fit_threshold(accs_g0: &[f64], accs_g1: &[f64]) -> Result<ThresholdRule, AttackError> {
    if accs_g0.is_empty() || accs_g1.is_empty() {
        return Err(AttackError::EmptyBank);
    }
    for &a in accs_g0.iter().chain(accs_g1.iter()) {
        if !a.is_finite() {
            return Err(AttackError::NonFiniteAccuracy(a));
        }
    }
    let mut pooled: Vec<f64> = accs_g0.iter().chain(accs_g1.iter()).copied().collect();
    pooled.sort_by(f64::total_cmp);
    pooled.dedup();
    if pooled.len() == 1 {
        return Ok(ThresholdRule { threshold: pooled[0], g1_above: true, degenerate: true });
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let preferred_above = mean(accs_g1) >= mean(accs_g0);

    let agreement = |threshold: f64, g1_above: bool| -> usize {
        let above = |a: f64| a >= threshold;
        let hits_g1 = accs_g1.iter().filter(|&&a| above(a) == g1_above).count();
        let hits_g0 = accs_g0.iter().filter(|&&a| above(a) != g1_above).count();
        hits_g1 + hits_g0
    };

    let mut best: Option<(usize, f64, bool)> = None;
    for pair in pooled.windows(2) {
        let candidate = (pair[0] + pair[1]) / 2.0;
        for g1_above in [preferred_above, !preferred_above] {
            let hits = agreement(candidate, g1_above);
            if best.map_or(true, |(b, _, _)| hits > b) {
                best = Some((hits, candidate, g1_above));
            }
        }
    }
    let (_, threshold, g1_above) = best.unwrap();
    Ok(ThresholdRule { threshold, g1_above, degenerate: false })
}

/// Threshold-test attack: fits [`fit_threshold`] on the banks' accuracies
/// over `eval_data` and classifies the victim's accuracy.
pub fn threshold_test(
    victim: &TrainedModel,
    bank: &ShadowBank,
    eval_data: &crate::datagen::DatasetTable,
) -> Result<AttackVerdict, AttackError> {
    let accs = |list: &[TrainedModel]| -> Result<Vec<f64>, AttackError> {
        list.iter().map(|m| models::accuracy(m, eval_data).map_err(AttackError::from)).collect()
    };
    let rule = fit_threshold(&accs(&bank.models_g0)?, &accs(&bank.models_g1)?)?;
    Ok(rule.classify(models::accuracy(victim, eval_data)?))
}

/// Meta-classifier fitted on flattened shadow prediction matrices.
#[derive(Clone, Debug)]
pub struct ZtoMeta {
    model: TrainedModel,
}

/// Trains the ZTO meta-classifier on per-shadow feature vectors (row-major
/// flattened prediction matrices, G0 labeled 0, G1 labeled 1). Rows are
/// canonically sorted so shadow order cannot influence the fit. Training is
/// full-batch; a linear meta starts from zero weights so a degenerate
/// feature set yields the neutral verdict.
pub fn fit_zto_meta(
    g0_preds: &[PredictionMatrix],
    g1_preds: &[PredictionMatrix],
    meta_spec: &ModelSpec,
) -> Result<ZtoMeta, AttackError> {
    if g0_preds.is_empty() || g1_preds.is_empty() {
        return Err(AttackError::EmptyBank);
    }
    for preds in g0_preds.iter().chain(g1_preds.iter()) {
        check_same_shape(&g0_preds[0], preds)?;
    }
    let mut rows: Vec<(Vec<f64>, u8)> = g0_preds
        .iter()
        .map(|p| (p.flatten(), 0u8))
        .chain(g1_preds.iter().map(|p| (p.flatten(), 1u8)))
        .collect();
    rows.sort_by(|a, b| {
        a.1.cmp(&b.1).then_with(|| {
            a.0.iter()
                .zip(b.0.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });

    let dim = rows[0].0.len();
    let mut features = Matrix::zeros(0, dim);
    let mut labels = Vec::with_capacity(rows.len());
    for (feat, label) in &rows {
        features.push_row(feat);
        labels.push(*label);
    }
    let table = crate::datagen::DatasetTable {
        features,
        property_attrs: vec![0; labels.len()],
        task_labels: labels,
        source_seed: meta_spec.seed,
    };
    let mut spec = meta_spec.clone();
    spec.batch_size = table.len();
    let init = match spec.arch {
        models::Arch::Linear => models::Init::Zeros,
        models::Arch::Mlp { .. } => models::Init::Uniform,
    };
    Ok(ZtoMeta { model: models::train_with_init(&spec, &table, init)? })
}

impl ZtoMeta {
    /// Classifies one victim's flattened prediction matrix.
    pub fn classify(&self, victim_preds: &PredictionMatrix) -> Result<AttackVerdict, AttackError> {
        let flat = victim_preds.flatten();
        let features = Matrix::from_flat(1, flat.len(), flat);
        let probs = models::predict_proba(&self.model, &features)?;
        let p1 = probs.row(0)[1];
        Ok(AttackVerdict {
            attack: AttackKind::Zto,
            predicted_bit: u8::from(p1 > 0.5),
            score: p1 - 0.5,
        })
    }
}

/// ZTO attack under full confidence access: queries every bank model and the
/// victim on the bundle, then fits and applies the meta-classifier.
pub fn zto_attack(
    victim: &TrainedModel,
    bank: &ShadowBank,
    query_points: &QueryBundle,
    meta_spec: &ModelSpec,
) -> Result<AttackVerdict, AttackError> {
    let preds = |list: &[TrainedModel]| -> Result<Vec<PredictionMatrix>, AttackError> {
        list.iter()
            .map(|m| models::predict_proba(m, &query_points.features).map_err(AttackError::from))
            .collect()
    };
    let meta = fit_zto_meta(&preds(&bank.models_g0)?, &preds(&bank.models_g1)?, meta_spec)?;
    meta.classify(&models::predict_proba(victim, &query_points.features)?)
}

/// Converts hard labels into the soft rows (1−ε, ε) / (ε, 1−ε) an adversary
/// substitutes when the victim API exposes labels only.
pub fn label_only_transform(
    labels: &[u8],
    epsilon: f64,
) -> Result<PredictionMatrix, AttackError> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(AttackError::InvalidEpsilon(epsilon));
    }
    if labels.is_empty() {
        return Err(AttackError::EmptyVictims);
    }
    let mut probs = Matrix::zeros(0, 2);
    for (row, &label) in labels.iter().enumerate() {
        match label {
            0 => probs.push_row(&[1.0 - epsilon, epsilon]),
            1 => probs.push_row(&[epsilon, 1.0 - epsilon]),
            value => return Err(AttackError::NonBinaryLabel { row, value }),
        }
    }
    Ok(PredictionMatrix::from_matrix(probs)?)
}

/// Graded confidences from label-only access: each query point is answered
/// by the label vote over `k` Gaussian-perturbed copies (σ = `sigma`), with
/// the vote shares clamped to `[ε, 1−ε]` and renormalized. With σ = 0 the
/// result equals [`label_only_transform`] of the point predictions.
pub fn neighborhood_confidence(
    model: &TrainedModel,
    features: &Matrix,
    k: usize,
    sigma: f64,
    epsilon: f64,
    seed_value: u64,
) -> Result<PredictionMatrix, AttackError> {
    if k == 0 {
        return Err(AttackError::InvalidNeighborCount);
    }
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(AttackError::InvalidNoise(sigma));
    }
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(AttackError::InvalidEpsilon(epsilon));
    }
    let mut expanded = Matrix::zeros(0, features.cols());
    let mut row = vec![0.0; features.cols()];
    let mut rng = seed::rng(seed_value);
    let noise = if sigma > 0.0 { Some(Normal::new(0.0, sigma).unwrap()) } else { None };
    for i in 0..features.rows() {
        for _ in 0..k {
            row.copy_from_slice(features.row(i));
            if let Some(noise) = &noise {
                for slot in row.iter_mut() {
                    *slot += noise.sample(&mut rng);
                }
            }
            expanded.push_row(&row);
        }
    }
    let labels = models::predict_labels(model, &expanded)?;
    let mut probs = Matrix::zeros(0, 2);
    let mut soft = [0.0; 2];
    for chunk in labels.chunks(k) {
        let ones = chunk.iter().filter(|&&l| l == 1).count() as f64;
        soft[1] = (ones / k as f64).clamp(epsilon, 1.0 - epsilon);
        soft[0] = (1.0 - ones / k as f64).clamp(epsilon, 1.0 - epsilon);
        let sum = soft[0] + soft[1];
        probs.push_row(&[soft[0] / sum, soft[1] / sum]);
    }
    Ok(PredictionMatrix::from_matrix(probs)?)
}

/// Fraction of victims a verdict closure classifies correctly, given the
/// G0-trained and G1-trained victim payloads.
pub fn distinguishing_accuracy<V, F>(
    mut verdict_for: F,
    victims_g0: &[V],
    victims_g1: &[V],
) -> Result<f64, AttackError>
where
    F: FnMut(&V) -> Result<AttackVerdict, AttackError>,
{
    if victims_g0.is_empty() || victims_g1.is_empty() {
        return Err(AttackError::EmptyVictims);
    }
    let mut correct = 0usize;
    for v in victims_g0 {
        correct += usize::from(verdict_for(v)?.predicted_bit == 0);
    }
    for v in victims_g1 {
        correct += usize::from(verdict_for(v)?.predicted_bit == 1);
    }
    Ok(correct as f64 / (victims_g0.len() + victims_g1.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn preds(rows: &[[f64; 2]]) -> PredictionMatrix {
        let mut m = Matrix::zeros(0, 2);
        for r in rows {
            m.push_row(r);
        }
        PredictionMatrix::from_matrix(m).unwrap()
    }

    #[test]
    fn kl_estimate_matches_hand_values() {
        let n = preds(&[[0.5, 0.5]]);
        let m = preds(&[[0.25, 0.75]]);
        let forward = kl_divergence_estimate(&n, &m, DEFAULT_PROB_FLOOR).unwrap();
        let analytic = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        assert!((forward - analytic).abs() < 1e-12);
        assert!((forward - 0.1438).abs() <= 1e-4, "forward = {forward}");

        let reverse = kl_divergence_estimate(&m, &n, DEFAULT_PROB_FLOOR).unwrap();
        let analytic_rev = 0.25 * (0.25f64 / 0.5).ln() + 0.75 * (0.75f64 / 0.5).ln();
        assert!((reverse - analytic_rev).abs() < 1e-12);
        assert!((reverse - 0.1308).abs() <= 1e-4, "reverse = {reverse}");
    }

    #[test]
    fn kl_of_identical_matrices_is_zero() {
        let p = preds(&[[0.3, 0.7], [0.9, 0.1]]);
        assert_eq!(kl_divergence_estimate(&p, &p, DEFAULT_PROB_FLOOR).unwrap(), 0.0);
    }

    #[test]
    fn floor_keeps_degenerate_rows_finite() {
        let hot = preds(&[[1.0, 0.0]]);
        let cold = preds(&[[0.0, 1.0]]);
        let kl = kl_divergence_estimate(&hot, &cold, DEFAULT_PROB_FLOOR).unwrap();
        assert!(kl.is_finite());
        assert!(kl > 1.0);
        assert!(matches!(
            kl_divergence_estimate(&hot, &cold, 0.0),
            Err(AttackError::InvalidFloor(_))
        ));
    }

    #[test]
    fn vote_sign_tracks_the_closer_bank() {
        let g0 = preds(&[[0.9, 0.1], [0.8, 0.2]]);
        let g1 = preds(&[[0.2, 0.8], [0.1, 0.9]]);
        let near_g1 = preds(&[[0.25, 0.75], [0.15, 0.85]]);
        assert!(weighted_vote(&near_g1, &g0, &g1).unwrap() > 0.0);
        let near_g0 = preds(&[[0.85, 0.15], [0.75, 0.25]]);
        assert!(weighted_vote(&near_g0, &g0, &g1).unwrap() < 0.0);
    }

    #[test]
    fn single_pair_bank_votes_for_its_own_side() {
        let g0 = preds(&[[0.9, 0.1]]);
        let g1 = preds(&[[0.2, 0.8]]);
        let verdict = kl_attack(
            &g1.clone(),
            std::slice::from_ref(&g0),
            std::slice::from_ref(&g1),
            &KlOptions { pair_fraction: 1.0, ..KlOptions::default() },
        )
        .unwrap();
        assert_eq!(verdict.predicted_bit, 1);
        assert!(verdict.score > 0.0);
    }

    #[test]
    fn raw_sum_matches_the_literal_double_sum() {
        let g0: Vec<_> = vec![
            preds(&[[0.8, 0.2], [0.7, 0.3]]),
            preds(&[[0.9, 0.1], [0.6, 0.4]]),
        ];
        let g1: Vec<_> = vec![
            preds(&[[0.3, 0.7], [0.2, 0.8]]),
            preds(&[[0.4, 0.6], [0.25, 0.75]]),
        ];
        let victim = preds(&[[0.35, 0.65], [0.3, 0.7]]);
        let verdict = kl_attack(
            &victim,
            &g0,
            &g1,
            &KlOptions { pair_fraction: 1.0, vote_mode: VoteMode::RawSum, ..KlOptions::default() },
        )
        .unwrap();
        let mut brute = 0.0;
        for n in &g0 {
            for p in &g1 {
                brute += kl_divergence_estimate(n, &victim, DEFAULT_PROB_FLOOR).unwrap()
                    - kl_divergence_estimate(p, &victim, DEFAULT_PROB_FLOOR).unwrap();
            }
        }
        assert!((verdict.score - brute).abs() < 1e-12);
        assert_eq!(verdict.predicted_bit, u8::from(brute > 0.0));
    }

    #[test]
    fn pair_subsampling_is_seeded_and_counted() {
        let g0: Vec<_> = (0..5).map(|i| preds(&[[0.5 + 0.05 * i as f64, 0.5 - 0.05 * i as f64]])).collect();
        let g1: Vec<_> = (0..4).map(|i| preds(&[[0.3 - 0.05 * i as f64, 0.7 + 0.05 * i as f64]])).collect();
        let victim = preds(&[[0.25, 0.75]]);
        let opts = KlOptions { pair_fraction: 0.5, seed: 9, ..KlOptions::default() };
        let a = kl_attack(&victim, &g0, &g1, &opts).unwrap();
        let b = kl_attack(&victim, &g0, &g1, &opts).unwrap();
        assert_eq!(a, b);
        let c = kl_attack(&victim, &g0, &g1, &KlOptions { seed: 10, ..opts }).unwrap();
        assert_eq!(a.predicted_bit, c.predicted_bit);
        // Simple mode exposes the kept-pair count through its score offset.
        let simple = kl_attack(
            &victim,
            &g0,
            &g1,
            &KlOptions { vote_mode: VoteMode::Simple, ..opts },
        )
        .unwrap();
        assert_eq!(simple.score, 10.0 - 5.0);
    }

    #[test]
    fn swapping_banks_flips_the_verdict() {
        let g0: Vec<_> = vec![preds(&[[0.8, 0.2]]), preds(&[[0.75, 0.25]])];
        let g1: Vec<_> = vec![preds(&[[0.3, 0.7]]), preds(&[[0.2, 0.8]])];
        let victim = preds(&[[0.28, 0.72]]);
        for mode in [VoteMode::Weighted, VoteMode::Simple, VoteMode::RawSum] {
            let opts = KlOptions { pair_fraction: 1.0, vote_mode: mode, ..KlOptions::default() };
            let straight = kl_attack(&victim, &g0, &g1, &opts).unwrap();
            let swapped = kl_attack(&victim, &g1, &g0, &opts).unwrap();
            assert_eq!(straight.predicted_bit, 1);
            assert_eq!(swapped.predicted_bit, 0, "mode {mode:?}");
        }
    }

    #[test]
    fn flip_kl_still_identifies_the_near_bank() {
        let g0: Vec<_> = vec![preds(&[[0.8, 0.2]])];
        let g1: Vec<_> = vec![preds(&[[0.2, 0.8]])];
        let victim = preds(&[[0.22, 0.78]]);
        let verdict = kl_attack(
            &victim,
            &g0,
            &g1,
            &KlOptions { pair_fraction: 1.0, flip_kl: true, ..KlOptions::default() },
        )
        .unwrap();
        assert_eq!(verdict.predicted_bit, 1);
    }

    #[test]
    fn empty_banks_are_rejected() {
        let victim = preds(&[[0.5, 0.5]]);
        assert!(matches!(
            kl_attack(&victim, &[], &[victim.clone()], &KlOptions::default()),
            Err(AttackError::EmptyBank)
        ));
        assert!(matches!(
            kl_attack(
                &victim,
                &[victim.clone()],
                &[victim.clone()],
                &KlOptions { pair_fraction: 0.0, ..KlOptions::default() }
            ),
            Err(AttackError::InvalidPairFraction(_))
        ));
    }

    #[test]
    fn threshold_separates_disjoint_banks() {
        let rule = fit_threshold(&[0.9, 0.85, 0.88], &[0.6, 0.65, 0.7]).unwrap();
        assert!(!rule.degenerate);
        assert!(!rule.g1_above);
        let low = rule.classify(0.62);
        assert_eq!(low.predicted_bit, 1);
        assert!(low.score > 0.0);
        let high = rule.classify(0.89);
        assert_eq!(high.predicted_bit, 0);
        assert!(high.score < 0.0);

        // Mirrored banks flip the orientation and the verdicts.
        let mirrored = fit_threshold(&[0.6, 0.65, 0.7], &[0.9, 0.85, 0.88]).unwrap();
        assert!(mirrored.g1_above);
        assert_eq!(mirrored.classify(0.62).predicted_bit, 0);
        assert_eq!(mirrored.classify(0.89).predicted_bit, 1);
    }

    #[test]
    fn equal_shadow_accuracies_degenerate_to_bit_zero() {
        let rule = fit_threshold(&[0.7, 0.7], &[0.7, 0.7]).unwrap();
        assert!(rule.degenerate);
        let verdict = rule.classify(0.9);
        assert_eq!(verdict.predicted_bit, 0);
        assert_eq!(verdict.score, 0.0);
    }

    #[test]
    fn threshold_tolerates_interleaved_accuracies() {
        let rule = fit_threshold(&[0.6, 0.8, 0.7], &[0.65, 0.85, 0.9]).unwrap();
        assert!(!rule.degenerate);
        assert!(rule.g1_above);
    }

    fn meta_spec() -> ModelSpec {
        ModelSpec {
            arch: models::Arch::Linear,
            epochs: 100,
            learning_rate: 0.5,
            batch_size: 8,
            l2_penalty: 1e-3,
            seed: 3,
        }
    }

    #[test]
    fn zto_identifies_a_cloned_shadow() {
        let g0: Vec<_> = vec![
            preds(&[[0.9, 0.1], [0.85, 0.15]]),
            preds(&[[0.88, 0.12], [0.8, 0.2]]),
        ];
        let g1: Vec<_> = vec![
            preds(&[[0.2, 0.8], [0.25, 0.75]]),
            preds(&[[0.15, 0.85], [0.3, 0.7]]),
        ];
        let meta = fit_zto_meta(&g0, &g1, &meta_spec()).unwrap();
        let verdict = meta.classify(&g1[0]).unwrap();
        assert_eq!(verdict.predicted_bit, 1);
        assert!(verdict.score > 0.0);
        assert_eq!(meta.classify(&g0[1]).unwrap().predicted_bit, 0);
    }

    #[test]
    fn zto_is_invariant_to_shadow_order() {
        let g0: Vec<_> = vec![preds(&[[0.9, 0.1]]), preds(&[[0.8, 0.2]]), preds(&[[0.7, 0.3]])];
        let g1: Vec<_> = vec![preds(&[[0.2, 0.8]]), preds(&[[0.3, 0.7]]), preds(&[[0.1, 0.9]])];
        let victim = preds(&[[0.25, 0.75]]);
        let forward = fit_zto_meta(&g0, &g1, &meta_spec()).unwrap().classify(&victim).unwrap();
        let mut g0_shuffled = g0.clone();
        g0_shuffled.reverse();
        let mut g1_shuffled = g1.clone();
        g1_shuffled.swap(0, 2);
        let shuffled =
            fit_zto_meta(&g0_shuffled, &g1_shuffled, &meta_spec()).unwrap().classify(&victim).unwrap();
        assert_eq!(forward, shuffled);
    }

    #[test]
    fn constant_meta_features_give_the_neutral_verdict() {
        let same = preds(&[[0.6, 0.4], [0.55, 0.45]]);
        let g0 = vec![same.clone(), same.clone()];
        let g1 = vec![same.clone(), same.clone()];
        let verdict =
            fit_zto_meta(&g0, &g1, &meta_spec()).unwrap().classify(&same).unwrap();
        assert_eq!(verdict.predicted_bit, 0);
        assert_eq!(verdict.score, 0.0);
    }

    #[test]
    fn label_only_transform_softens_bits() {
        let soft = label_only_transform(&[0, 1, 1], 0.01).unwrap();
        assert_eq!(soft.row(0), &[0.99, 0.01]);
        assert_eq!(soft.row(1), &[0.01, 0.99]);
        assert!(matches!(label_only_transform(&[0], 0.5), Err(AttackError::InvalidEpsilon(_))));
        assert!(matches!(label_only_transform(&[0], 0.0), Err(AttackError::InvalidEpsilon(_))));
        assert!(matches!(
            label_only_transform(&[2], 0.01),
            Err(AttackError::NonBinaryLabel { row: 0, value: 2 })
        ));
    }

    fn far_blob_model() -> (TrainedModel, Matrix) {
        let spec = crate::datagen::BaseDistributionSpec::axis_aligned(2, 6.0, 0.0, 0.4, [0.5, 0.5]);
        let data = crate::datagen::synth_generate(&spec, 300, 0.5, 4).unwrap();
        let model = models::train(
            &ModelSpec {
                arch: models::Arch::Linear,
                epochs: 15,
                learning_rate: 0.3,
                batch_size: 32,
                l2_penalty: 1e-4,
                seed: 8,
            },
            &data,
        )
        .unwrap();
        let mut queries = Matrix::zeros(0, 2);
        for i in 0..12 {
            queries.push_row(data.features.row(i));
        }
        (model, queries)
    }

    #[test]
    fn zero_sigma_neighborhood_equals_direct_transform() {
        let (model, queries) = far_blob_model();
        let direct =
            label_only_transform(&models::predict_labels(&model, &queries).unwrap(), 0.01).unwrap();
        let sampled = neighborhood_confidence(&model, &queries, 10, 0.0, 0.01, 5).unwrap();
        assert_eq!(direct, sampled);
    }

    #[test]
    fn neighborhood_votes_concentrate_far_from_the_boundary() {
        let (model, queries) = far_blob_model();
        let labels = models::predict_labels(&model, &queries).unwrap();
        let soft = neighborhood_confidence(&model, &queries, 200, 0.05, 0.01, 5).unwrap();
        for i in 0..soft.rows() {
            let p1 = soft.row(i)[1];
            if labels[i] == 1 {
                assert!(p1 >= 0.9, "row {i}: p1 = {p1}");
            } else {
                assert!(p1 <= 0.1, "row {i}: p1 = {p1}");
            }
            let sum: f64 = soft.row(i).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn neighborhood_parameters_are_validated() {
        let (model, queries) = far_blob_model();
        assert!(matches!(
            neighborhood_confidence(&model, &queries, 0, 0.1, 0.01, 5),
            Err(AttackError::InvalidNeighborCount)
        ));
        assert!(matches!(
            neighborhood_confidence(&model, &queries, 5, -1.0, 0.01, 5),
            Err(AttackError::InvalidNoise(_))
        ));
    }

    #[test]
    fn distinguishing_accuracy_counts_both_sides() {
        let verdict = |bit: u8| AttackVerdict { attack: AttackKind::Kl, predicted_bit: bit, score: 0.0 };
        let acc = distinguishing_accuracy(
            |&v: &u8| Ok(verdict(v)),
            &[0, 0, 1],
            &[1, 1],
        )
        .unwrap();
        assert!((acc - 0.8).abs() < 1e-12);
        let inverted = distinguishing_accuracy(|&v: &u8| Ok(verdict(1 - v)), &[0, 0], &[1, 1]).unwrap();
        assert_eq!(inverted, 0.0);
        assert!(matches!(
            distinguishing_accuracy(|&v: &u8| Ok(verdict(v)), &[], &[1]),
            Err(AttackError::EmptyVictims)
        ));
    }

    #[test]
    fn query_bundle_requires_even_halves() {
        let h0 = Matrix::from_flat(2, 2, vec![0.0; 4]);
        let h1 = Matrix::from_flat(3, 2, vec![0.0; 6]);
        assert!(matches!(
            QueryBundle::from_halves(&h0, &h1, "test"),
            Err(AttackError::UnevenHalves { left: 2, right: 3 })
        ));
        let bundle = QueryBundle::from_halves(&h0, &h0, "test").unwrap();
        assert_eq!(bundle.len(), 4);
        assert_eq!(bundle.len() % 2, 0);
    }

    #[test]
    fn shadow_bank_validation() {
        let (model, _) = far_blob_model();
        assert!(matches!(
            ShadowBank::new(vec![], vec![model.clone()], 0.5, 0.2),
            Err(AttackError::EmptyBank)
        ));
        assert!(matches!(
            ShadowBank::new(vec![model.clone()], vec![model.clone()], 0.5, 0.5),
            Err(AttackError::EqualAlphas)
        ));
        assert!(matches!(
            ShadowBank::new(vec![model.clone()], vec![model.clone()], 1.2, 0.5),
            Err(AttackError::InvalidAlpha(_))
        ));
        assert!(ShadowBank::new(vec![model.clone()], vec![model], 0.5, 0.2).is_ok());
    }

    prop_compose! {
        fn stochastic_rows(rows: usize)(
            raw in proptest::collection::vec(0.02f64..0.98, rows)
        ) -> PredictionMatrix {
            let mut m = Matrix::zeros(0, 2);
            for p in raw {
                m.push_row(&[p, 1.0 - p]);
            }
            PredictionMatrix::from_matrix(m).unwrap()
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]
        #[test]
        fn kl_estimate_is_nonnegative(
            n in stochastic_rows(6),
            m in stochastic_rows(6),
        ) {
            let kl = kl_divergence_estimate(&n, &m, DEFAULT_PROB_FLOOR).unwrap();
            prop_assert!(kl >= -1e-12, "kl = {kl}");
        }

        #[test]
        fn bank_swap_negates_scores(
            g0a in stochastic_rows(4),
            g0b in stochastic_rows(4),
            g1a in stochastic_rows(4),
            g1b in stochastic_rows(4),
            victim in stochastic_rows(4),
        ) {
            let opts = KlOptions { pair_fraction: 1.0, vote_mode: VoteMode::RawSum, ..KlOptions::default() };
            let g0 = vec![g0a, g0b];
            let g1 = vec![g1a, g1b];
            let straight = kl_attack(&victim, &g0, &g1, &opts).unwrap();
            let swapped = kl_attack(&victim, &g1, &g0, &opts).unwrap();
            prop_assert!((straight.score + swapped.score).abs() <= 1e-12);
            if straight.score.abs() > 1e-9 {
                prop_assert_ne!(straight.predicted_bit, swapped.predicted_bit);
            }
        }
    }
}
