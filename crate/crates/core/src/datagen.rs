//! Synthetic tabular data with a controllable link between a binary task
//! label and a binary property attribute.
//!
//! A [`BaseDistributionSpec`] fixes four Gaussian cells, one per
//! (property, task) pair, plus the conditional task rate per property value.
//! The property ratio α — the fraction of rows with attribute 1 — is the
//! quantity the rest of the crate tries to infer, so every transform here
//! either controls it ([`apply_ratio`], [`undersample`], [`oversample`],
//! [`augment_oversample`]) or perturbs training data while leaving it alone
//! ([`poison_labels`]).
//!
//! All randomized operations take an explicit seed and are byte-reproducible.
//! Subsampling operations emit surviving rows in their original order;
//! oversampling operations append synthesized rows after the originals.

use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::seq::index::sample as index_sample;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::seed;

/// Errors from data generation, resampling, and CSV ingestion.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid distribution spec: {0}")]
    InvalidSpec(String),
    #[error("ratio {0} outside [0, 1]")]
    InvalidRatio(f64),
    #[error("fraction {0} outside open interval (0, 1)")]
    InvalidFraction(f64),
    #[error("requested size must be at least 1")]
    InvalidSize,
    #[error("noise sigma {0} must be finite and non-negative")]
    InvalidNoise(f64),
    #[error("flip rate {0} outside [0, 1]")]
    InvalidFlipRate(f64),
    #[error("operation requires a non-empty table")]
    EmptyTable,
    #[error("need {needed} rows with attribute {attr}, only {available} available")]
    InsufficientRows { attr: u8, needed: usize, available: usize },
    #[error("target ratio {target} unreachable: {reason}")]
    UnreachableRatio { target: f64, reason: &'static str },
    #[error("column {column} is degenerate: {reason}")]
    DegenerateColumn { column: String, reason: &'static str },
    #[error("column {column} not found in CSV header")]
    MissingColumn { column: String },
    #[error("row {row}, column {column}: cannot parse {value:?} as a number")]
    NonNumericValue { row: usize, column: String, value: String },
    #[error("row {row}, column {column}: expected 0 or 1, found {value}")]
    NonBinaryValue { row: usize, column: String, value: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Four Gaussian cells indexed by (property, task), a shared isotropic
/// covariance scale, and the task rate conditioned on each property value.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaseDistributionSpec {
    /// Feature dimensionality d.
    pub feature_dim: usize,
    /// Cell means, indexed `cell_means[property][task]`, each of length d.
    pub cell_means: [[Vec<f64>; 2]; 2],
    /// Standard deviation shared by every feature in every cell; ≥ 0.
    pub cov_scale: f64,
    /// P(task = 1 | property = p) for p in {0, 1}.
    pub task_given_property: [f64; 2],
}

impl BaseDistributionSpec {
    /// Spec whose task label shifts feature 0 and whose property attribute
    /// shifts feature 1, both centered at zero. Requires `feature_dim >= 2`.
    pub fn axis_aligned(
        feature_dim: usize,
        task_shift: f64,
        property_shift: f64,
        cov_scale: f64,
        task_given_property: [f64; 2],
    ) -> Self {
        assert!(feature_dim >= 2, "axis-aligned spec needs at least 2 features");
        let mut cells: [[Vec<f64>; 2]; 2] = Default::default();
        for p in 0..2 {
            for t in 0..2 {
                let mut mean = vec![0.0; feature_dim];
                mean[0] = (t as f64 - 0.5) * task_shift;
                mean[1] = (p as f64 - 0.5) * property_shift;
                cells[p][t] = mean;
            }
        }
        BaseDistributionSpec {
            feature_dim,
            cell_means: cells,
            cov_scale,
            task_given_property,
        }
    }

    /// Checks dimensions and parameter ranges.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.feature_dim == 0 {
            return Err(DataError::InvalidSpec("feature_dim must be at least 1".into()));
        }
        for p in 0..2 {
            for t in 0..2 {
                let len = self.cell_means[p][t].len();
                if len != self.feature_dim {
                    return Err(DataError::InvalidSpec(format!(
                        "cell mean ({p},{t}) has length {len}, expected {}",
                        self.feature_dim
                    )));
                }
                if self.cell_means[p][t].iter().any(|v| !v.is_finite()) {
                    return Err(DataError::InvalidSpec(format!(
                        "cell mean ({p},{t}) contains a non-finite value"
                    )));
                }
            }
        }
        if !self.cov_scale.is_finite() || self.cov_scale < 0.0 {
            return Err(DataError::InvalidSpec(format!(
                "cov_scale {} must be finite and non-negative",
                self.cov_scale
            )));
        }
        for (p, q) in self.task_given_property.iter().enumerate() {
            if !(0.0..=1.0).contains(q) {
                return Err(DataError::InvalidSpec(format!(
                    "task_given_property[{p}] = {q} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Task rates per property value that produce a task/property phi
/// correlation of `phi` when the property ratio is 0.5.
pub fn task_mix_for_phi(phi: f64) -> [f64; 2] {
    assert!(phi.abs() <= 1.0, "phi must lie in [-1, 1]");
    [0.5 - phi / 2.0, 0.5 + phi / 2.0]
}

/// Rows of features with a binary task label and a binary property attribute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetTable {
    /// Feature rows, one per example.
    pub features: Matrix,
    /// Task label per row.
    pub task_labels: Vec<u8>,
    /// Property attribute per row.
    pub property_attrs: Vec<u8>,
    /// Seed that produced this table; 0 for ingested data.
    pub source_seed: u64,
}

impl DatasetTable {
    pub fn len(&self) -> usize {
        self.task_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task_labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Fraction of rows carrying property attribute 1; NaN when empty.
    pub fn property_ratio(&self) -> f64 {
        let ones = self.property_attrs.iter().filter(|&&a| a == 1).count();
        ones as f64 / self.len() as f64
    }

    /// Row counts per property attribute value, as (attr 0, attr 1).
    pub fn attr_counts(&self) -> (usize, usize) {
        let ones = self.property_attrs.iter().filter(|&&a| a == 1).count();
        (self.len() - ones, ones)
    }

    /// New table containing the given rows, in the order listed.
    pub fn select(&self, indices: &[usize]) -> DatasetTable {
        DatasetTable {
            features: self.features.select_rows(indices),
            task_labels: indices.iter().map(|&i| self.task_labels[i]).collect(),
            property_attrs: indices.iter().map(|&i| self.property_attrs[i]).collect(),
            source_seed: self.source_seed,
        }
    }

    /// Concatenates two tables with matching feature dimensionality.
    pub fn concat(top: &DatasetTable, bottom: &DatasetTable) -> DatasetTable {
        let mut task_labels = top.task_labels.clone();
        task_labels.extend_from_slice(&bottom.task_labels);
        let mut property_attrs = top.property_attrs.clone();
        property_attrs.extend_from_slice(&bottom.property_attrs);
        DatasetTable {
            features: Matrix::vstack(&top.features, &bottom.features),
            task_labels,
            property_attrs,
            source_seed: top.source_seed,
        }
    }
}

/// Target property ratio and output size for a training-set draw.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RatioTransformer {
    /// Desired fraction of attribute-1 rows.
    pub alpha: f64,
    /// Number of rows in the output table.
    pub size: usize,
}

impl RatioTransformer {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(0.0..=1.0).contains(&self.alpha) || !self.alpha.is_finite() {
            return Err(DataError::InvalidRatio(self.alpha));
        }
        if self.size == 0 {
            return Err(DataError::InvalidSize);
        }
        Ok(())
    }
}

/// round(x) with exact halves going up.
pub(crate) fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Draws `n` rows from the base distribution at the given property ratio.
pub fn synth_generate(
    spec: &BaseDistributionSpec,
    n: usize,
    property_ratio: f64,
    seed_value: u64,
) -> Result<DatasetTable, DataError> {
    spec.validate()?;
    if n == 0 {
        return Err(DataError::InvalidSize);
    }
    if !(0.0..=1.0).contains(&property_ratio) || !property_ratio.is_finite() {
        return Err(DataError::InvalidRatio(property_ratio));
    }
    let mut rng = seed::rng(seed_value);
    let mut features = Matrix::zeros(0, spec.feature_dim);
    let mut task_labels = Vec::with_capacity(n);
    let mut property_attrs = Vec::with_capacity(n);
    let mut row = vec![0.0; spec.feature_dim];
    for _ in 0..n {
        let p = usize::from(rng.random::<f64>() < property_ratio);
        let t = usize::from(rng.random::<f64>() < spec.task_given_property[p]);
        let mean = &spec.cell_means[p][t];
        for (j, slot) in row.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            *slot = mean[j] + spec.cov_scale * z;
        }
        features.push_row(&row);
        task_labels.push(t as u8);
        property_attrs.push(p as u8);
    }
    Ok(DatasetTable { features, task_labels, property_attrs, source_seed: seed_value })
}

/// Draws a table of exactly `t.size` rows from `data` without replacement,
/// with round(alpha * size) rows at attribute 1. Surviving rows keep their
/// original order.
pub fn apply_ratio(
    data: &DatasetTable,
    t: &RatioTransformer,
    seed_value: u64,
) -> Result<DatasetTable, DataError> {
    t.validate()?;
    if data.is_empty() {
        return Err(DataError::EmptyTable);
    }
    let want_ones = round_half_up(t.alpha * t.size as f64).min(t.size);
    let want_zeros = t.size - want_ones;
    let ones: Vec<usize> = (0..data.len()).filter(|&i| data.property_attrs[i] == 1).collect();
    let zeros: Vec<usize> = (0..data.len()).filter(|&i| data.property_attrs[i] == 0).collect();
    if ones.len() < want_ones {
        return Err(DataError::InsufficientRows { attr: 1, needed: want_ones, available: ones.len() });
    }
    if zeros.len() < want_zeros {
        return Err(DataError::InsufficientRows { attr: 0, needed: want_zeros, available: zeros.len() });
    }
    let mut rng = seed::rng(seed_value);
    let mut picked: Vec<usize> = index_sample(&mut rng, ones.len(), want_ones)
        .into_iter()
        .map(|k| ones[k])
        .collect();
    picked.extend(index_sample(&mut rng, zeros.len(), want_zeros).into_iter().map(|k| zeros[k]));
    picked.sort_unstable();
    Ok(data.select(&picked))
}

/// Splits a table into disjoint victim and adversary pools, stratified on
/// the (task, property) cell so both sides keep the source ratios. The
/// victim side receives round(victim_fraction * n) rows overall.
pub fn split_victim_adversary(
    data: &DatasetTable,
    victim_fraction: f64,
    seed_value: u64,
) -> Result<(DatasetTable, DatasetTable), DataError> {
    if !(victim_fraction > 0.0 && victim_fraction < 1.0) {
        return Err(DataError::InvalidFraction(victim_fraction));
    }
    if data.is_empty() {
        return Err(DataError::EmptyTable);
    }
    let n = data.len();
    let total_victim = round_half_up(victim_fraction * n as f64).min(n);

    let mut strata: [Vec<usize>; 4] = Default::default();
    for i in 0..n {
        let cell = (data.task_labels[i] as usize) * 2 + data.property_attrs[i] as usize;
        strata[cell].push(i);
    }
    // Largest-remainder apportionment so per-stratum takes sum to the exact
    // overall victim count while staying within one row of proportionality.
    let mut takes = [0usize; 4];
    let mut remainders: Vec<(usize, f64)> = Vec::new();
    let mut assigned = 0;
    for (c, stratum) in strata.iter().enumerate() {
        let exact = victim_fraction * stratum.len() as f64;
        takes[c] = (exact.floor() as usize).min(stratum.len());
        assigned += takes[c];
        remainders.push((c, exact - exact.floor()));
    }
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut short = total_victim.saturating_sub(assigned);
    for &(c, _) in remainders.iter().cycle().take(remainders.len() * 2) {
        if short == 0 {
            break;
        }
        if takes[c] < strata[c].len() {
            takes[c] += 1;
            short -= 1;
        }
    }

    let mut rng = seed::rng(seed_value);
    let mut victim_idx = Vec::with_capacity(total_victim);
    let mut adversary_idx = Vec::with_capacity(n - total_victim);
    for (c, stratum) in strata.iter().enumerate() {
        if stratum.is_empty() {
            continue;
        }
        let chosen = index_sample(&mut rng, stratum.len(), takes[c]);
        let mut mask = vec![false; stratum.len()];
        for k in chosen {
            mask[k] = true;
        }
        for (k, &row) in stratum.iter().enumerate() {
            if mask[k] {
                victim_idx.push(row);
            } else {
                adversary_idx.push(row);
            }
        }
    }
    victim_idx.sort_unstable();
    adversary_idx.sort_unstable();
    Ok((data.select(&victim_idx), data.select(&adversary_idx)))
}

fn needed_class_size(target: f64, other_class: usize) -> usize {
    // Solve k / (k + other) = target for k.
    round_half_up(target * other_class as f64 / (1.0 - target))
}

/// Deletes rows uniformly from the over-represented property class until the
/// ratio reaches `target_alpha`. The under-represented class is untouched.
pub fn undersample(
    data: &DatasetTable,
    target_alpha: f64,
    seed_value: u64,
) -> Result<DatasetTable, DataError> {
    if !(0.0..=1.0).contains(&target_alpha) || !target_alpha.is_finite() {
        return Err(DataError::InvalidRatio(target_alpha));
    }
    if data.is_empty() {
        return Err(DataError::EmptyTable);
    }
    let (zeros, ones) = data.attr_counts();
    let ratio = ones as f64 / data.len() as f64;
    let (keep_zeros, keep_ones) = if ratio > target_alpha {
        (zeros, needed_class_size(target_alpha, zeros).min(ones))
    } else if ratio < target_alpha {
        (needed_class_size(1.0 - target_alpha, ones).min(zeros), ones)
    } else {
        (zeros, ones)
    };
    if keep_zeros + keep_ones == 0 {
        return Err(DataError::UnreachableRatio {
            target: target_alpha,
            reason: "deleting the over-represented class would empty the table",
        });
    }
    let mut rng = seed::rng(seed_value);
    let mut kept = Vec::with_capacity(keep_zeros + keep_ones);
    for (attr, keep) in [(1u8, keep_ones), (0u8, keep_zeros)] {
        let class: Vec<usize> =
            (0..data.len()).filter(|&i| data.property_attrs[i] == attr).collect();
        if keep == class.len() {
            kept.extend_from_slice(&class);
        } else {
            kept.extend(index_sample(&mut rng, class.len(), keep).into_iter().map(|k| class[k]));
        }
    }
    kept.sort_unstable();
    Ok(data.select(&kept))
}

fn expand_to_ratio(
    data: &DatasetTable,
    target_alpha: f64,
    noise_sigma: Option<f64>,
    seed_value: u64,
) -> Result<DatasetTable, DataError> {
    if !(0.0..=1.0).contains(&target_alpha) || !target_alpha.is_finite() {
        return Err(DataError::InvalidRatio(target_alpha));
    }
    if data.is_empty() {
        return Err(DataError::EmptyTable);
    }
    let (zeros, ones) = data.attr_counts();
    let ratio = ones as f64 / data.len() as f64;
    let (grow_attr, class_size, want) = if ratio < target_alpha {
        if target_alpha == 1.0 {
            return Err(DataError::UnreachableRatio {
                target: target_alpha,
                reason: "duplication cannot remove the attribute-0 rows already present",
            });
        }
        (1u8, ones, needed_class_size(target_alpha, zeros))
    } else if ratio > target_alpha {
        if target_alpha == 0.0 {
            return Err(DataError::UnreachableRatio {
                target: target_alpha,
                reason: "duplication cannot remove the attribute-1 rows already present",
            });
        }
        (0u8, zeros, needed_class_size(1.0 - target_alpha, ones))
    } else {
        return Ok(data.clone());
    };
    let additions = want.saturating_sub(class_size);
    if additions > 0 && class_size == 0 {
        return Err(DataError::InsufficientRows { attr: grow_attr, needed: 1, available: 0 });
    }
    let class: Vec<usize> =
        (0..data.len()).filter(|&i| data.property_attrs[i] == grow_attr).collect();
    // Separate streams so the same seed picks the same source rows whether or
    // not noise is requested.
    let mut pick_rng = seed::rng(seed::derive(seed_value, seed::Stream::Defense, &[0]));
    let mut noise_rng = seed::rng(seed::derive(seed_value, seed::Stream::Defense, &[1]));
    let mut out = data.clone();
    let mut row = vec![0.0; data.feature_dim()];
    for _ in 0..additions {
        let src = class[pick_rng.random_range(0..class.len())];
        row.copy_from_slice(out.features.row(src));
        if let Some(sigma) = noise_sigma {
            if sigma > 0.0 {
                for slot in row.iter_mut() {
                    let z: f64 = noise_rng.sample(StandardNormal);
                    *slot += sigma * z;
                }
            }
        }
        out.features.push_row(&row);
        out.task_labels.push(out.task_labels[src]);
        out.property_attrs.push(out.property_attrs[src]);
    }
    Ok(out)
}

/// Duplicates uniformly chosen rows of the under-represented property class
/// until the ratio reaches `target_alpha`. Every original row is retained;
/// duplicates are appended after the originals.
pub fn oversample(
    data: &DatasetTable,
    target_alpha: f64,
    seed_value: u64,
) -> Result<DatasetTable, DataError> {
    expand_to_ratio(data, target_alpha, None, seed_value)
}

/// [`oversample`] variant that adds Gaussian feature noise with standard
/// deviation `noise_sigma` to each synthesized row. With `noise_sigma = 0`
/// the output is byte-identical to [`oversample`] under the same seed.
pub fn augment_oversample(
    data: &DatasetTable,
    target_alpha: f64,
    noise_sigma: f64,
    seed_value: u64,
) -> Result<DatasetTable, DataError> {
    if !noise_sigma.is_finite() || noise_sigma < 0.0 {
        return Err(DataError::InvalidNoise(noise_sigma));
    }
    expand_to_ratio(data, target_alpha, Some(noise_sigma), seed_value)
}

/// Flips the task label on round(flip_rate * n) uniformly chosen rows.
/// Features and property attributes are untouched.
pub fn poison_labels(
    data: &DatasetTable,
    flip_rate: f64,
    seed_value: u64,
) -> Result<DatasetTable, DataError> {
    if !(0.0..=1.0).contains(&flip_rate) || !flip_rate.is_finite() {
        return Err(DataError::InvalidFlipRate(flip_rate));
    }
    if data.is_empty() {
        return Err(DataError::EmptyTable);
    }
    let flips = round_half_up(flip_rate * data.len() as f64).min(data.len());
    let mut rng = seed::rng(seed_value);
    let mut out = data.clone();
    for i in index_sample(&mut rng, data.len(), flips) {
        out.task_labels[i] = 1 - out.task_labels[i];
    }
    Ok(out)
}

/// Phi coefficient between the task label and the property attribute.
/// Errors when either column is constant, since the coefficient is undefined.
pub fn measure_correlation(data: &DatasetTable) -> Result<f64, DataError> {
    if data.is_empty() {
        return Err(DataError::EmptyTable);
    }
    let mut counts = [[0f64; 2]; 2];
    for i in 0..data.len() {
        counts[data.task_labels[i] as usize][data.property_attrs[i] as usize] += 1.0;
    }
    let t1 = counts[1][0] + counts[1][1];
    let t0 = counts[0][0] + counts[0][1];
    let p1 = counts[0][1] + counts[1][1];
    let p0 = counts[0][0] + counts[1][0];
    if t1 == 0.0 || t0 == 0.0 {
        return Err(DataError::DegenerateColumn {
            column: "task".into(),
            reason: "constant column has undefined correlation",
        });
    }
    if p1 == 0.0 || p0 == 0.0 {
        return Err(DataError::DegenerateColumn {
            column: "property".into(),
            reason: "constant column has undefined correlation",
        });
    }
    Ok((counts[1][1] * counts[0][0] - counts[1][0] * counts[0][1]) / (t1 * t0 * p1 * p0).sqrt())
}

/// Loads a CSV with a header row. `task_column` and `property_column` must
/// hold 0/1 values; every other column is read as a numeric feature and
/// standardized to zero mean and unit variance. Constant feature columns
/// standardize to all zeros.
pub fn load_csv(
    path: &Path,
    task_column: &str,
    property_column: &str,
) -> Result<DatasetTable, DataError> {
    let file = std::fs::File::open(path)?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let task_idx = find(task_column).ok_or_else(|| DataError::MissingColumn {
        column: task_column.to_string(),
    })?;
    let property_idx = find(property_column).ok_or_else(|| DataError::MissingColumn {
        column: property_column.to_string(),
    })?;
    let feature_cols: Vec<usize> =
        (0..headers.len()).filter(|&i| i != task_idx && i != property_idx).collect();

    let parse = |field: &str, row: usize, col: usize| -> Result<f64, DataError> {
        field.trim().parse::<f64>().map_err(|_| DataError::NonNumericValue {
            row,
            column: headers[col].to_string(),
            value: field.to_string(),
        })
    };
    let parse_bit = |field: &str, row: usize, col: usize| -> Result<u8, DataError> {
        let v = parse(field, row, col)?;
        if v == 0.0 || v == 1.0 {
            Ok(v as u8)
        } else {
            Err(DataError::NonBinaryValue { row, column: headers[col].to_string(), value: v })
        }
    };

    let mut features = Matrix::zeros(0, feature_cols.len());
    let mut task_labels = Vec::new();
    let mut property_attrs = Vec::new();
    let mut row_buf = vec![0.0; feature_cols.len()];
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        for (j, &c) in feature_cols.iter().enumerate() {
            row_buf[j] = parse(&record[c], row, c)?;
        }
        task_labels.push(parse_bit(&record[task_idx], row, task_idx)?);
        property_attrs.push(parse_bit(&record[property_idx], row, property_idx)?);
        features.push_row(&row_buf);
    }
    if task_labels.is_empty() {
        return Err(DataError::EmptyTable);
    }

    let n = features.rows() as f64;
    for j in 0..features.cols() {
        let mean = (0..features.rows()).map(|i| features.row(i)[j]).sum::<f64>() / n;
        let var = (0..features.rows()).map(|i| (features.row(i)[j] - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        for i in 0..features.rows() {
            let v = &mut features.row_mut(i)[j];
            *v = if std == 0.0 { 0.0 } else { (*v - mean) / std };
        }
    }
    Ok(DatasetTable { features, task_labels, property_attrs, source_seed: 0 })
}

/// Writes a table using the same schema [`load_csv`] ingests: feature
/// columns `f1..fd` followed by `task` and `property`.
pub fn save_csv(data: &DatasetTable, path: &Path) -> Result<(), DataError> {
    let file = std::fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    let mut header: Vec<String> =
        (1..=data.feature_dim()).map(|j| format!("f{j}")).collect();
    header.push("task".into());
    header.push("property".into());
    writeln!(out, "{}", header.join(","))?;
    for i in 0..data.len() {
        let mut fields: Vec<String> = data.features.row(i).iter().map(|v| format!("{v}")).collect();
        fields.push(format!("{}", data.task_labels[i]));
        fields.push(format!("{}", data.property_attrs[i]));
        writeln!(out, "{}", fields.join(","))?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn test_spec() -> BaseDistributionSpec {
        BaseDistributionSpec::axis_aligned(4, 2.0, 1.0, 1.0, [0.35, 0.65])
    }

    /// Table with `zeros` attr-0 rows then `ones` attr-1 rows; feature 0
    /// holds the original row index so rows stay distinguishable.
    fn labeled_table(zeros: usize, ones: usize) -> DatasetTable {
        let n = zeros + ones;
        let mut features = Matrix::zeros(0, 2);
        let mut task_labels = Vec::new();
        let mut property_attrs = Vec::new();
        for i in 0..n {
            features.push_row(&[i as f64, 0.0]);
            task_labels.push((i % 2) as u8);
            property_attrs.push(u8::from(i >= zeros));
        }
        DatasetTable { features, task_labels, property_attrs, source_seed: 7 }
    }

    #[test]
    fn degenerate_ratios_fix_the_attribute() {
        let spec = test_spec();
        let all_zero = synth_generate(&spec, 500, 0.0, 1).unwrap();
        assert!(all_zero.property_attrs.iter().all(|&a| a == 0));
        let all_one = synth_generate(&spec, 500, 1.0, 1).unwrap();
        assert!(all_one.property_attrs.iter().all(|&a| a == 1));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = test_spec();
        let a = synth_generate(&spec, 300, 0.4, 99).unwrap();
        let b = synth_generate(&spec, 300, 0.4, 99).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&spec, 300, 0.4, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn measured_phi_tracks_requested_phi() {
        let spec = BaseDistributionSpec::axis_aligned(2, 2.0, 1.0, 1.0, task_mix_for_phi(0.3));
        let table = synth_generate(&spec, 20_000, 0.5, 11).unwrap();
        let phi = measure_correlation(&table).unwrap();
        assert!((phi - 0.3).abs() < 0.02, "phi = {phi}");
    }

    #[test]
    fn apply_ratio_hits_exact_counts() {
        let pool = labeled_table(500, 500);
        let drawn = apply_ratio(&pool, &RatioTransformer { alpha: 0.2, size: 200 }, 3).unwrap();
        assert_eq!(drawn.len(), 200);
        assert_eq!(drawn.attr_counts(), (160, 40));
        // Round-half-up on the attribute-1 count.
        let odd = apply_ratio(&pool, &RatioTransformer { alpha: 0.5, size: 81 }, 3).unwrap();
        assert_eq!(odd.attr_counts(), (40, 41));
    }

    #[test]
    fn apply_ratio_rejects_undersized_pools() {
        let pool = labeled_table(50, 5);
        let err = apply_ratio(&pool, &RatioTransformer { alpha: 0.5, size: 40 }, 3).unwrap_err();
        match err {
            DataError::InsufficientRows { attr: 1, needed: 20, available: 5 } => {}
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn split_partitions_and_stratifies() {
        let spec = BaseDistributionSpec::axis_aligned(2, 2.0, 1.0, 1.0, [0.5, 0.5]);
        let pool = synth_generate(&spec, 1000, 0.5, 5).unwrap();
        let (victim, adversary) = split_victim_adversary(&pool, 0.5, 8).unwrap();
        assert_eq!(victim.len(), 500);
        assert_eq!(adversary.len(), 500);
        assert!((victim.property_ratio() - pool.property_ratio()).abs() <= 2.0 / 500.0);
        assert!((adversary.property_ratio() - pool.property_ratio()).abs() <= 2.0 / 500.0);
        // Disjoint and exhaustive: continuous features make rows unique, so
        // the bit patterns of feature 0 must all differ.
        let mut seen: Vec<u64> = victim
            .features
            .data()
            .chunks(2)
            .chain(adversary.features.data().chunks(2))
            .map(|r| r[0].to_bits())
            .collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 1000);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let pool = labeled_table(10, 10);
        assert!(matches!(
            split_victim_adversary(&pool, 0.0, 1),
            Err(DataError::InvalidFraction(_))
        ));
        assert!(matches!(
            split_victim_adversary(&pool, 1.0, 1),
            Err(DataError::InvalidFraction(_))
        ));
    }

    #[test]
    fn undersample_keeps_minority_class_whole() {
        let table = labeled_table(30, 70);
        let balanced = undersample(&table, 0.5, 21).unwrap();
        assert_eq!(balanced.attr_counts(), (30, 30));
        // All 30 minority rows survive.
        let minority_kept = (0..balanced.len())
            .filter(|&i| balanced.property_attrs[i] == 0)
            .map(|i| balanced.features.row(i)[0] as usize)
            .collect::<Vec<_>>();
        assert_eq!(minority_kept, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn undersample_removal_is_uniform() {
        let table = labeled_table(30, 70);
        let mut keep_count = vec![0u32; 100];
        let seeds = 4000;
        for s in 0..seeds {
            let kept = undersample(&table, 0.5, s).unwrap();
            for i in 0..kept.len() {
                keep_count[kept.features.row(i)[0] as usize] += 1;
            }
        }
        let expected = 30.0 / 70.0;
        for row in 30..100 {
            let freq = keep_count[row] as f64 / seeds as f64;
            assert!((freq - expected).abs() < 0.03, "row {row} kept at {freq}");
        }
    }

    #[test]
    fn undersample_can_delete_a_whole_class() {
        let table = labeled_table(20, 30);
        let pure = undersample(&table, 1.0, 4).unwrap();
        assert_eq!(pure.attr_counts(), (0, 30));
        let err = undersample(&labeled_table(20, 0), 1.0, 4).unwrap_err();
        assert!(matches!(err, DataError::UnreachableRatio { .. }));
    }

    #[test]
    fn oversample_appends_duplicates_of_the_minority() {
        let table = labeled_table(70, 30);
        let balanced = oversample(&table, 0.5, 17).unwrap();
        assert_eq!(balanced.attr_counts(), (70, 70));
        // Originals intact, additions drawn from the minority class.
        for i in 0..table.len() {
            assert_eq!(balanced.features.row(i), table.features.row(i));
        }
        for i in table.len()..balanced.len() {
            assert_eq!(balanced.property_attrs[i], 1);
            let src = balanced.features.row(i)[0] as usize;
            assert!(src >= 70, "duplicate sourced from majority row {src}");
        }
    }

    #[test]
    fn oversample_rejects_growth_from_nothing() {
        let err = oversample(&labeled_table(30, 0), 0.5, 2).unwrap_err();
        assert!(matches!(err, DataError::InsufficientRows { attr: 1, .. }));
        let err = oversample(&labeled_table(5, 5), 1.0, 2).unwrap_err();
        assert!(matches!(err, DataError::UnreachableRatio { .. }));
    }

    #[test]
    fn augment_with_zero_sigma_matches_oversample() {
        let table = labeled_table(60, 20);
        let plain = oversample(&table, 0.4, 33).unwrap();
        let silent = augment_oversample(&table, 0.4, 0.0, 33).unwrap();
        assert_eq!(plain, silent);
    }

    #[test]
    fn augment_perturbs_features_but_copies_labels() {
        let table = labeled_table(60, 20);
        let noisy = augment_oversample(&table, 0.4, 0.5, 33).unwrap();
        let quiet = oversample(&table, 0.4, 33).unwrap();
        assert_eq!(noisy.len(), quiet.len());
        assert!(noisy.len() > table.len());
        for i in table.len()..noisy.len() {
            assert_eq!(noisy.task_labels[i], quiet.task_labels[i]);
            assert_eq!(noisy.property_attrs[i], quiet.property_attrs[i]);
            assert_ne!(noisy.features.row(i), quiet.features.row(i));
        }
    }

    #[test]
    fn poison_counts_and_involution() {
        let table = labeled_table(50, 50);
        assert_eq!(poison_labels(&table, 0.0, 9).unwrap(), table);
        let flipped = poison_labels(&table, 1.0, 9).unwrap();
        for i in 0..table.len() {
            assert_eq!(flipped.task_labels[i], 1 - table.task_labels[i]);
        }
        assert_eq!(flipped.features, table.features);
        assert_eq!(flipped.property_attrs, table.property_attrs);

        let partial = poison_labels(&table, 0.2, 9).unwrap();
        let differing = (0..table.len())
            .filter(|&i| partial.task_labels[i] != table.task_labels[i])
            .count();
        assert_eq!(differing, 20);
        // Same seed flips the same rows, so applying twice restores the table.
        assert_eq!(poison_labels(&partial, 0.2, 9).unwrap(), table);
    }

    #[test]
    fn correlation_extremes() {
        let mut aligned = labeled_table(10, 10);
        aligned.task_labels = aligned.property_attrs.clone();
        assert_eq!(measure_correlation(&aligned).unwrap(), 1.0);
        let mut opposed = aligned.clone();
        opposed.task_labels = opposed.property_attrs.iter().map(|&a| 1 - a).collect();
        assert_eq!(measure_correlation(&opposed).unwrap(), -1.0);
        let mut constant = aligned;
        constant.task_labels = vec![1; constant.len()];
        assert!(matches!(
            measure_correlation(&constant),
            Err(DataError::DegenerateColumn { .. })
        ));
    }

    #[test]
    fn independent_columns_have_near_zero_phi() {
        let spec = BaseDistributionSpec::axis_aligned(2, 2.0, 1.0, 1.0, [0.5, 0.5]);
        let table = synth_generate(&spec, 20_000, 0.5, 13).unwrap();
        assert!(measure_correlation(&table).unwrap().abs() < 0.02);
    }

    #[test]
    fn csv_roundtrip_standardizes_features() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.csv");
        std::fs::write(&path, "x,task,property\n1,0,1\n2,1,0\n3,1,1\n").unwrap();
        let table = load_csv(&path, "task", "property").unwrap();
        assert_eq!(table.len(), 3);
        assert_eq!(table.task_labels, vec![0, 1, 1]);
        assert_eq!(table.property_attrs, vec![1, 0, 1]);
        // x standardizes to (x - 2) / sqrt(2/3).
        let scale = (2.0f64 / 3.0).sqrt();
        for (i, want) in [(-1.0 / scale), 0.0, 1.0 / scale].iter().enumerate() {
            assert!((table.features.row(i)[0] - want).abs() < 1e-12);
        }

        let out = dir.path().join("export.csv");
        save_csv(&table, &out).unwrap();
        let reloaded = load_csv(&out, "task", "property").unwrap();
        assert_eq!(reloaded.task_labels, table.task_labels);
        assert_eq!(reloaded.property_attrs, table.property_attrs);
        for i in 0..table.len() {
            for j in 0..table.feature_dim() {
                assert!((reloaded.features.row(i)[j] - table.features.row(i)[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_errors_carry_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.csv");
        std::fs::write(&path, "x,task,property\n1,0,1\n").unwrap();
        assert!(matches!(
            load_csv(&path, "label", "property"),
            Err(DataError::MissingColumn { column }) if column == "label"
        ));
        std::fs::write(&path, "x,task,property\n1,0,1\noops,1,0\n").unwrap();
        match load_csv(&path, "task", "property") {
            Err(DataError::NonNumericValue { row: 2, column, value }) => {
                assert_eq!(column, "x");
                assert_eq!(value, "oops");
            }
            other => panic!("unexpected result {other:?}"),
        }
        std::fs::write(&path, "x,task,property\n1,2,1\n").unwrap();
        assert!(matches!(
            load_csv(&path, "task", "property"),
            Err(DataError::NonBinaryValue { row: 1, value, .. }) if value == 2.0
        ));
    }

    #[test]
    fn constant_csv_column_standardizes_to_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.csv");
        std::fs::write(&path, "x,y,task,property\n5,1,0,1\n5,2,1,0\n5,3,1,1\n").unwrap();
        let table = load_csv(&path, "task", "property").unwrap();
        for i in 0..table.len() {
            assert_eq!(table.features.row(i)[0], 0.0);
        }
    }

    proptest! {
        #[test]
        fn apply_ratio_lands_within_one_row(alpha in 0.0f64..=1.0, size in 1usize..120) {
            let pool = labeled_table(200, 200);
            if round_half_up(alpha * size as f64) <= 200
                && size - round_half_up(alpha * size as f64).min(size) <= 200
            {
                let drawn = apply_ratio(&pool, &RatioTransformer { alpha, size }, 5).unwrap();
                prop_assert_eq!(drawn.len(), size);
                prop_assert!((drawn.property_ratio() - alpha).abs() <= 0.5 / size as f64 + 1e-12);
            }
        }

        #[test]
        fn resampling_agrees_on_the_achieved_ratio(
            zeros in 5usize..80,
            ones in 5usize..80,
            target in 0.05f64..0.95,
        ) {
            let table = labeled_table(zeros, ones);
            let under = undersample(&table, target, 11).unwrap();
            let over = oversample(&table, target, 11).unwrap();
            prop_assert!((under.property_ratio() - target).abs() <= 1.0 / under.len() as f64);
            prop_assert!((over.property_ratio() - target).abs() <= 1.0 / over.len() as f64);
        }

        #[test]
        fn split_partition_is_exact(n in 2usize..300, frac in 0.1f64..0.9) {
            let table = labeled_table(n / 2, n - n / 2);
            let (v, a) = split_victim_adversary(&table, frac, 3).unwrap();
            prop_assert_eq!(v.len(), round_half_up(frac * n as f64));
            prop_assert_eq!(v.len() + a.len(), n);
            let mut ids: Vec<usize> = (0..v.len()).map(|i| v.features.row(i)[0] as usize).collect();
            ids.extend((0..a.len()).map(|i| a.features.row(i)[0] as usize));
            ids.sort_unstable();
            prop_assert_eq!(ids, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn poison_is_involutive(zeros in 1usize..50, ones in 1usize..50, rate in 0.0f64..=1.0) {
            let table = labeled_table(zeros, ones);
            let once = poison_labels(&table, rate, 77).unwrap();
            let twice = poison_labels(&once, rate, 77).unwrap();
            prop_assert_eq!(twice, table);
        }
    }
}
