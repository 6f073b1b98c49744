//! Small feed-forward classifiers trained from scratch with mini-batch SGD.
//!
//! Models are either a linear softmax classifier or an MLP with tanh hidden
//! layers; both share one flat parameter vector laid out layer by layer
//! (row-major weights, then biases). Training is fully determined by the
//! [`ModelSpec`], including its seed: weight init and epoch shuffles come
//! from one sequential RNG stream, so a run's first k epochs are
//! byte-identical to a k-epoch run — the property behind
//! [`train_with_checkpoints`].
//!
//! The loss is mean cross-entropy plus an L2 penalty on weights (biases
//! exempt). Softmax subtracts the row max before exponentiating, so
//! probabilities stay finite for any finite logits.

use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{self, DataError, DatasetTable, RatioTransformer};
use crate::matrix::Matrix;
use crate::seed;

/// Number of task classes; the crate works with binary tasks throughout.
pub const NUM_CLASSES: usize = 2;

/// Errors from model construction, training, inference, and persistence.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("training data is empty")]
    EmptyDataset,
    #[error("training data contains a single task class")]
    SingleClassData,
    #[error("feature dimension mismatch: model expects {expected}, got {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("loss became non-finite during epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid probability matrix: {0}")]
    InvalidProbability(String),
    #[error("invalid checkpoint list: {0}")]
    InvalidCheckpoints(String),
    #[error("fleet member {index}: {source}")]
    FleetMember { index: usize, source: Box<ModelError> },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("unsupported model format version {found}")]
    UnsupportedVersion { found: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Classifier architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    /// Single softmax layer.
    Linear,
    /// Tanh hidden layers of the given widths, then a softmax layer.
    Mlp { hidden: Vec<usize> },
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub l2_penalty: f64,
    /// Seeds weight init and every epoch shuffle.
    pub seed: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.epochs == 0 {
            return Err(ModelError::InvalidSpec("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(ModelError::InvalidSpec(format!(
                "learning_rate {} must be positive and finite",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidSpec("batch_size must be at least 1".into()));
        }
        if self.l2_penalty < 0.0 || !self.l2_penalty.is_finite() {
            return Err(ModelError::InvalidSpec(format!(
                "l2_penalty {} must be non-negative and finite",
                self.l2_penalty
            )));
        }
        if let Arch::Mlp { hidden } = &self.arch {
            if hidden.is_empty() || hidden.iter().any(|&h| h == 0) {
                return Err(ModelError::InvalidSpec(
                    "mlp hidden widths must be non-empty and positive".into(),
                ));
            }
        }
        Ok(())
    }

    fn layer_dims(&self, feature_dim: usize) -> Vec<usize> {
        let mut dims = vec![feature_dim];
        if let Arch::Mlp { hidden } = &self.arch {
            dims.extend_from_slice(hidden);
        }
        dims.push(NUM_CLASSES);
        dims
    }
}

/// A trained classifier: spec, layer shape descriptors, and the flat
/// parameter vector (per layer: row-major weights, then biases).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    /// Layer widths from input to output, e.g. `[4, 32, 2]`.
    pub layer_dims: Vec<usize>,
    pub params: Vec<f64>,
    pub epochs_completed: usize,
    /// Accuracy on the data the model was trained on.
    pub train_accuracy: f64,
}

impl TrainedModel {
    pub fn feature_dim(&self) -> usize {
        self.layer_dims[0]
    }

    /// Checks that the parameter vector matches the shape descriptors and is
    /// finite throughout.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layer_dims.len() < 2 {
            return Err(ModelError::InvalidSpec("need at least input and output layers".into()));
        }
        let expected = param_count(&self.layer_dims);
        if self.params.len() != expected {
            return Err(ModelError::InvalidSpec(format!(
                "parameter vector has {} entries, layer dims require {expected}",
                self.params.len()
            )));
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(ModelError::InvalidSpec("parameters contain a non-finite value".into()));
        }
        Ok(())
    }
}

/// Row-stochastic matrix of per-class probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionMatrix {
    probs: Matrix,
}

impl PredictionMatrix {
    /// Validates and wraps a probability matrix: at least one row, at least
    /// two classes, entries in [0, 1], rows summing to 1 within 1e-9.
    pub fn from_matrix(probs: Matrix) -> Result<Self, ModelError> {
        if probs.rows() == 0 {
            return Err(ModelError::InvalidProbability("no rows".into()));
        }
        if probs.cols() < 2 {
            return Err(ModelError::InvalidProbability(format!(
                "{} class columns, need at least 2",
                probs.cols()
            )));
        }
        for i in 0..probs.rows() {
            let mut sum = 0.0;
            for &p in probs.row(i) {
                if !(0.0..=1.0).contains(&p) {
                    return Err(ModelError::InvalidProbability(format!(
                        "row {i} holds {p}, outside [0, 1]"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(ModelError::InvalidProbability(format!("row {i} sums to {sum}")));
            }
        }
        Ok(PredictionMatrix { probs })
    }

    pub fn rows(&self) -> usize {
        self.probs.rows()
    }

    pub fn classes(&self) -> usize {
        self.probs.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.probs.row(i)
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    /// Flat row-major copy of the probabilities.
    pub fn flatten(&self) -> Vec<f64> {
        self.probs.data().to_vec()
    }
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
}

/// Offset of layer `l`'s weights within the flat parameter vector; biases
/// follow the weights.
fn layer_offset(dims: &[usize], l: usize) -> usize {
    dims.windows(2).take(l).map(|w| w[1] * (w[0] + 1)).sum()
}

/// Scratch activations reused across rows.
struct Workspace {
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Workspace {
    fn new(dims: &[usize]) -> Self {
        Workspace {
            acts: dims.iter().map(|&d| vec![0.0; d]).collect(),
            deltas: dims.iter().map(|&d| vec![0.0; d]).collect(),
        }
    }
}

/// Forward pass for one row; fills `ws.acts` and leaves raw logits in the
/// final slot. Hidden layers use tanh.
fn forward(dims: &[usize], params: &[f64], x: &[f64], ws: &mut Workspace) {
    ws.acts[0].copy_from_slice(x);
    let layers = dims.len() - 1;
    for l in 0..layers {
        let (in_dim, out_dim) = (dims[l], dims[l + 1]);
        let w_off = layer_offset(dims, l);
        let b_off = w_off + out_dim * in_dim;
        let (prev, rest) = ws.acts.split_at_mut(l + 1);
        let input = &prev[l];
        let out = &mut rest[0];
        for o in 0..out_dim {
            let row = &params[w_off + o * in_dim..w_off + (o + 1) * in_dim];
            let mut z = params[b_off + o];
            for (wi, xi) in row.iter().zip(input.iter()) {
                z += wi * xi;
            }
            out[o] = if l < layers - 1 { z.tanh() } else { z };
        }
    }
}

/// Softmax with max subtraction, writing into `out`.
fn softmax(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits.iter()) {
        let e = (z - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Mean cross-entropy plus L2 over the given rows, with the gradient
/// accumulated into `grad` (same layout as `params`).
fn loss_and_grad_indexed(
    dims: &[usize],
    params: &[f64],
    features: &Matrix,
    labels: &[u8],
    idx: &[usize],
    l2: f64,
    grad: &mut [f64],
    ws: &mut Workspace,
) -> f64 {
    grad.fill(0.0);
    let layers = dims.len() - 1;
    let n = idx.len() as f64;
    let mut probs = vec![0.0; *dims.last().unwrap()];
    let mut total_ce = 0.0;
    for &r in idx {
        forward(dims, params, features.row(r), ws);
        softmax(&ws.acts[layers], &mut probs);
        let y = labels[r] as usize;
        total_ce += -probs[y].ln();
        // Output delta: p - onehot(y).
        for (c, d) in ws.deltas[layers].iter_mut().enumerate() {
            *d = probs[c] - if c == y { 1.0 } else { 0.0 };
        }
        for l in (0..layers).rev() {
            let (in_dim, out_dim) = (dims[l], dims[l + 1]);
            let w_off = layer_offset(dims, l);
            let b_off = w_off + out_dim * in_dim;
            let (lower, upper) = ws.deltas.split_at_mut(l + 1);
            let delta = &upper[0];
            for o in 0..out_dim {
                let d = delta[o];
                let g_row = &mut grad[w_off + o * in_dim..w_off + (o + 1) * in_dim];
                for (g, &a) in g_row.iter_mut().zip(ws.acts[l].iter()) {
                    *g += d * a;
                }
                grad[b_off + o] += d;
            }
            if l > 0 {
                let prev_delta = &mut lower[l];
                for (i, pd) in prev_delta.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for o in 0..out_dim {
                        s += params[w_off + o * in_dim + i] * delta[o];
                    }
                    // tanh'(z) expressed through the activation itself.
                    *pd = s * (1.0 - ws.acts[l][i] * ws.acts[l][i]);
                }
            }
        }
    }
    for g in grad.iter_mut() {
        *g /= n;
    }
    let mut penalty = 0.0;
    for l in 0..layers {
        let (in_dim, out_dim) = (dims[l], dims[l + 1]);
        let w_off = layer_offset(dims, l);
        for k in 0..out_dim * in_dim {
            penalty += params[w_off + k] * params[w_off + k];
            grad[w_off + k] += l2 * params[w_off + k];
        }
    }
    total_ce / n + 0.5 * l2 * penalty
}

/// Mean cross-entropy plus L2 penalty and its analytic gradient over a whole
/// feature table. Exposed for direct numerical inspection of the training
/// objective.
pub fn loss_and_gradient(
    dims: &[usize],
    params: &[f64],
    features: &Matrix,
    labels: &[u8],
    l2: f64,
) -> (f64, Vec<f64>) {
    assert_eq!(params.len(), param_count(dims), "parameter vector does not match dims");
    assert_eq!(features.rows(), labels.len(), "feature/label row mismatch");
    assert!(features.rows() > 0, "need at least one row");
    let mut ws = Workspace::new(dims);
    let mut grad = vec![0.0; params.len()];
    let idx: Vec<usize> = (0..features.rows()).collect();
    let loss = loss_and_grad_indexed(dims, params, features, labels, &idx, l2, &mut grad, &mut ws);
    (loss, grad)
}

/// Training objective of a trained model on a table (mean CE + L2 penalty).
pub fn dataset_loss(model: &TrainedModel, data: &DatasetTable) -> Result<f64, ModelError> {
    check_features(model, &data.features)?;
    let (loss, _) = loss_and_gradient(
        &model.layer_dims,
        &model.params,
        &data.features,
        &data.task_labels,
        model.spec.l2_penalty,
    );
    Ok(loss)
}

pub(crate) enum Init {
    /// Uniform in ±1/sqrt(fan_in) per layer; biases zero.
    Uniform,
    /// All parameters zero; only sensible for convex (linear) models.
    Zeros,
}

pub(crate) fn train_with_init(
    spec: &ModelSpec,
    data: &DatasetTable,
    init: Init,
) -> Result<TrainedModel, ModelError> {
    Ok(checkpoint_run(spec, data, &[spec.epochs], init)?.pop().unwrap())
}

fn checkpoint_run(
    spec: &ModelSpec,
    data: &DatasetTable,
    checkpoint_epochs: &[usize],
    init: Init,
) -> Result<Vec<TrainedModel>, ModelError> {
    spec.validate()?;
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let classes_seen: std::collections::BTreeSet<u8> = data.task_labels.iter().copied().collect();
    if classes_seen.len() < 2 {
        return Err(ModelError::SingleClassData);
    }
    if checkpoint_epochs.is_empty() {
        return Err(ModelError::InvalidCheckpoints("checkpoint list is empty".into()));
    }
    if checkpoint_epochs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ModelError::InvalidCheckpoints(
            "checkpoint epochs must be strictly increasing".into(),
        ));
    }
    if checkpoint_epochs[0] == 0 || *checkpoint_epochs.last().unwrap() > spec.epochs {
        return Err(ModelError::InvalidCheckpoints(format!(
            "checkpoint epochs must lie in 1..={}",
            spec.epochs
        )));
    }

    let dims = spec.layer_dims(data.feature_dim());
    let mut rng = seed::rng(spec.seed);
    let mut params = vec![0.0; param_count(&dims)];
    if let Init::Uniform = init {
        for l in 0..dims.len() - 1 {
            let (in_dim, out_dim) = (dims[l], dims[l + 1]);
            let bound = 1.0 / (in_dim as f64).sqrt();
            let w_off = layer_offset(&dims, l);
            for k in 0..out_dim * in_dim {
                params[w_off + k] = rng.random_range(-bound..bound);
            }
        }
    }

    let mut ws = Workspace::new(&dims);
    let mut grad = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut snapshots = Vec::with_capacity(checkpoint_epochs.len());
    let last_wanted = *checkpoint_epochs.last().unwrap();
    for epoch in 1..=last_wanted {
        order.shuffle(&mut rng);
        for batch in order.chunks(spec.batch_size) {
            let loss = loss_and_grad_indexed(
                &dims,
                &params,
                &data.features,
                &data.task_labels,
                batch,
                spec.l2_penalty,
                &mut grad,
                &mut ws,
            );
            if !loss.is_finite() {
                return Err(ModelError::NonFiniteLoss { epoch });
            }
            for (p, g) in params.iter_mut().zip(grad.iter()) {
                *p -= spec.learning_rate * g;
            }
        }
        if checkpoint_epochs.contains(&epoch) {
            let model = TrainedModel {
                spec: spec.clone(),
                layer_dims: dims.clone(),
                params: params.clone(),
                epochs_completed: epoch,
                train_accuracy: accuracy_from_params(&dims, &params, data),
            };
            model.validate().map_err(|_| ModelError::NonFiniteLoss { epoch })?;
            snapshots.push(model);
        }
    }
    Ok(snapshots)
}

/// Trains a classifier according to the spec. Deterministic: same spec and
/// data give byte-identical parameters.
pub fn train(spec: &ModelSpec, data: &DatasetTable) -> Result<TrainedModel, ModelError> {
    train_with_init(spec, data, Init::Uniform)
}

/// Trains once, snapshotting the model after each listed epoch. The list
/// must be strictly increasing within `1..=spec.epochs`. The snapshot at
/// epoch k is byte-identical to [`train`] with `epochs = k`.
pub fn train_with_checkpoints(
    spec: &ModelSpec,
    data: &DatasetTable,
    checkpoint_epochs: &[usize],
) -> Result<Vec<TrainedModel>, ModelError> {
    checkpoint_run(spec, data, checkpoint_epochs, Init::Uniform)
}

fn check_features(model: &TrainedModel, features: &Matrix) -> Result<(), ModelError> {
    if features.cols() != model.feature_dim() {
        return Err(ModelError::ShapeMismatch {
            expected: model.feature_dim(),
            found: features.cols(),
        });
    }
    if features.rows() == 0 {
        return Err(ModelError::EmptyDataset);
    }
    Ok(())
}

/// Class probabilities for each feature row.
pub fn predict_proba(
    model: &TrainedModel,
    features: &Matrix,
) -> Result<PredictionMatrix, ModelError> {
    check_features(model, features)?;
    let dims = &model.layer_dims;
    let mut ws = Workspace::new(dims);
    let mut out = Matrix::zeros(features.rows(), NUM_CLASSES);
    for i in 0..features.rows() {
        forward(dims, &model.params, features.row(i), &mut ws);
        softmax(&ws.acts[dims.len() - 1].clone(), out.row_mut(i));
    }
    PredictionMatrix::from_matrix(out)
}

/// Hard labels by argmax; ties resolve to the lower class index.
pub fn predict_labels(model: &TrainedModel, features: &Matrix) -> Result<Vec<u8>, ModelError> {
    let probs = predict_proba(model, features)?;
    Ok((0..probs.rows()).map(|i| argmax(probs.row(i)) as u8).collect())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, &p) in row.iter().enumerate().skip(1) {
        if p > row[best] {
            best = c;
        }
    }
    best
}

fn accuracy_from_params(dims: &[usize], params: &[f64], data: &DatasetTable) -> f64 {
    let mut ws = Workspace::new(dims);
    let mut probs = vec![0.0; NUM_CLASSES];
    let mut correct = 0usize;
    for i in 0..data.len() {
        forward(dims, params, data.features.row(i), &mut ws);
        softmax(&ws.acts[dims.len() - 1], &mut probs);
        if argmax(&probs) as u8 == data.task_labels[i] {
            correct += 1;
        }
    }
    correct as f64 / data.len() as f64
}

/// Fraction of rows whose predicted label matches the task label.
pub fn accuracy(model: &TrainedModel, data: &DatasetTable) -> Result<f64, ModelError> {
    check_features(model, &data.features)?;
    Ok(accuracy_from_params(&model.layer_dims, &model.params, data))
}

/// Trains `count` models, each on a fresh [`datagen::apply_ratio`] draw from
/// the pool and with its own derived training seed. Member i's draw and
/// training depend only on `(master_seed, i)`, so fleets are reproducible
/// under any parallel schedule.
pub fn train_fleet(
    spec_template: &ModelSpec,
    pool: &DatasetTable,
    transformer: &RatioTransformer,
    count: usize,
    master_seed: u64,
) -> Result<Vec<TrainedModel>, ModelError> {
    if count == 0 {
        return Err(ModelError::InvalidSpec("fleet count must be at least 1".into()));
    }
    spec_template.validate()?;
    transformer.validate().map_err(ModelError::Data)?;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let member = |e: ModelError| ModelError::FleetMember { index: i, source: Box::new(e) };
            let sample_seed = seed::derive(master_seed, seed::Stream::FleetSample, &[i as u64]);
            let data = datagen::apply_ratio(pool, transformer, sample_seed)
                .map_err(|e| member(ModelError::Data(e)))?;
            let mut spec = spec_template.clone();
            spec.seed = seed::derive(master_seed, seed::Stream::FleetTrain, &[i as u64]);
            train(&spec, &data).map_err(member)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    model: TrainedModel,
}

const MODEL_FORMAT_VERSION: u32 = 1;

/// Writes a model as versioned JSON. Parameters survive the round trip
/// bit-exactly.
pub fn save_model(model: &TrainedModel, path: &Path) -> Result<(), ModelError> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(
        BufWriter::new(file),
        &ModelFile { format_version: MODEL_FORMAT_VERSION, model: model.clone() },
    )?;
    Ok(())
}

/// Reads a model written by [`save_model`], validating version and shape.
pub fn load_model(path: &Path) -> Result<TrainedModel, ModelError> {
    let file = std::fs::File::open(path)?;
    let parsed: ModelFile = serde_json::from_reader(BufReader::new(file))?;
    if parsed.format_version != MODEL_FORMAT_VERSION {
        return Err(ModelError::UnsupportedVersion { found: parsed.format_version });
    }
    parsed.model.validate()?;
    Ok(parsed.model)
}
