//! Experiment configuration: one JSON document, versioned, validated
//! fail-closed. Unknown keys are rejected everywhere so a typo cannot
//! silently change what an archived report means.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackKind, VoteMode};
use crate::models::{Arch, ModelSpec};

use super::RunnerError;

/// Config format this build reads and writes.
pub const SCHEMA_VERSION: u32 = 1;

pub const DEFAULT_QUERY_SIZE: usize = 200;
pub const DEFAULT_ZTO_QUERY_POINTS: usize = 16;
pub const DEFAULT_LABEL_EPSILON: f64 = 0.01;
pub const DEFAULT_NEIGHBOR_COUNT: usize = 10;
pub const DEFAULT_NEIGHBOR_SIGMA: f64 = 0.25;

fn default_query_size() -> usize {
    DEFAULT_QUERY_SIZE
}
fn default_eval_size() -> usize {
    400
}
fn default_victim_fraction() -> f64 {
    0.5
}
fn default_batch_size() -> usize {
    32
}
fn default_shift() -> f64 {
    1.0
}
fn default_cov_scale() -> f64 {
    1.0
}
fn default_pair_fraction() -> f64 {
    0.8
}
fn default_vote_mode() -> VoteMode {
    VoteMode::Weighted
}
fn default_zto_query_points() -> usize {
    DEFAULT_ZTO_QUERY_POINTS
}
fn default_epsilon() -> f64 {
    DEFAULT_LABEL_EPSILON
}
fn default_neighbor_count() -> usize {
    DEFAULT_NEIGHBOR_COUNT
}
fn default_neighbor_sigma() -> f64 {
    DEFAULT_NEIGHBOR_SIGMA
}

/// Where the experiment's rows come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Gaussian mixture with a tunable task/property correlation.
    Synthetic {
        pool_size: usize,
        feature_dim: usize,
        #[serde(default = "default_shift")]
        task_shift: f64,
        #[serde(default = "default_shift")]
        property_shift: f64,
        #[serde(default = "default_cov_scale")]
        cov_scale: f64,
        /// Target phi correlation between task label and property attribute.
        phi: f64,
    },
    /// Pre-existing table with binary task and property columns; every
    /// other column is read as a numeric feature.
    Csv { path: String, task_column: String, property_column: String },
}

/// Model architecture, config-side. Kept separate from the trained-model
/// type so unknown keys here are still rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ArchConfig {
    Linear,
    Mlp { hidden: Vec<usize> },
}

impl ArchConfig {
    pub fn to_arch(&self) -> Arch {
        match self {
            ArchConfig::Linear => Arch::Linear,
            ArchConfig::Mlp { hidden } => Arch::Mlp { hidden: hidden.clone() },
        }
    }

    /// Short human label used in grid reports ("linear", "mlp[32,16]").
    pub fn label(&self) -> String {
        match self {
            ArchConfig::Linear => "linear".into(),
            ArchConfig::Mlp { hidden } => {
                let dims: Vec<String> = hidden.iter().map(|h| h.to_string()).collect();
                format!("mlp[{}]", dims.join(","))
            }
        }
    }
}

/// Training hyperparameters; seeds are derived by the runner, never stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: ArchConfig,
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub l2_penalty: f64,
}

impl ModelConfig {
    pub fn to_spec(&self, seed: u64) -> ModelSpec {
        ModelSpec {
            arch: self.arch.to_arch(),
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            l2_penalty: self.l2_penalty,
            seed,
        }
    }

    fn check(&self, what: &str) -> Result<(), RunnerError> {
        self.to_spec(0)
            .validate()
            .map_err(|e| RunnerError::Config(format!("{what}: {e}")))
    }
}

/// One attack to evaluate, with its tuning knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackConfig {
    Kl {
        #[serde(default = "default_pair_fraction")]
        pair_fraction: f64,
        #[serde(default = "default_vote_mode")]
        vote_mode: VoteMode,
        #[serde(default)]
        flip_kl: bool,
    },
    ThresholdTest,
    Zto {
        #[serde(default = "default_zto_query_points")]
        query_points: usize,
        /// Meta-classifier spec; linear default when omitted.
        #[serde(default)]
        meta: Option<ModelConfig>,
    },
}

impl AttackConfig {
    pub fn kind(&self) -> AttackKind {
        match self {
            AttackConfig::Kl { .. } => AttackKind::Kl,
            AttackConfig::ThresholdTest => AttackKind::ThresholdTest,
            AttackConfig::Zto { .. } => AttackKind::Zto,
        }
    }
}

/// Victim-side training-data manipulation hiding or degrading the ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DefenseConfig {
    /// Drop majority-attribute rows until the decoy ratio holds.
    Undersample,
    /// Duplicate minority-attribute rows until the decoy ratio holds.
    Oversample,
    /// Oversample with Gaussian feature noise on the copies.
    Augment { sigma: f64 },
    /// Flip a fraction of task labels.
    Poison { rate: f64 },
}

impl DefenseConfig {
    pub fn label(&self) -> &'static str {
        match self {
            DefenseConfig::Undersample => "undersample",
            DefenseConfig::Oversample => "oversample",
            DefenseConfig::Augment { .. } => "augment",
            DefenseConfig::Poison { .. } => "poison",
        }
    }
}

/// What the attacker sees when querying a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AccessConfig {
    /// Full confidence vectors.
    Confidence,
    /// Hard labels, re-encoded as epsilon-clamped confidence rows.
    LabelOnlyDirect {
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
    /// Hard labels plus neighborhood sampling to estimate confidences.
    LabelOnlySampling {
        #[serde(default = "default_epsilon")]
        epsilon: f64,
        #[serde(default = "default_neighbor_count")]
        k: usize,
        #[serde(default = "default_neighbor_sigma")]
        sigma: f64,
    },
}

impl Default for AccessConfig {
    fn default() -> Self {
        AccessConfig::Confidence
    }
}

/// Full experiment description. Everything the runner does is a pure
/// function of this structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub master_seed: u64,
    pub data: DataConfig,
    /// Null-hypothesis ratio (also the defense decoy ratio).
    pub alpha0: f64,
    pub alpha1_grid: Vec<f64>,
    pub victims_per_side: usize,
    pub shadows_per_side: usize,
    pub trials: usize,
    /// Rows drawn for each model's training set.
    pub train_size: usize,
    /// Rows in the mixed query bundle (half per candidate ratio).
    #[serde(default = "default_query_size")]
    pub query_size: usize,
    /// Rows in the balanced table used for task accuracy and fairness.
    #[serde(default = "default_eval_size")]
    pub eval_size: usize,
    /// Fraction of the pool the victim keeps; the adversary gets the rest.
    #[serde(default = "default_victim_fraction")]
    pub victim_fraction: f64,
    pub victim_model: ModelConfig,
    /// Shadow-model spec; defaults to the victim's when omitted.
    #[serde(default)]
    pub adversary_model: Option<ModelConfig>,
    pub attacks: Vec<AttackConfig>,
    #[serde(default)]
    pub defense: Option<DefenseConfig>,
    /// Re-apply the defense to shadow training data, modelling an adversary
    /// who knows the victim's full pipeline.
    #[serde(default)]
    pub same_setup_adversary: bool,
    #[serde(default)]
    pub access: AccessConfig,
    /// Victim training epochs to snapshot and attack; defaults to the final
    /// epoch only.
    #[serde(default)]
    pub epoch_checkpoints: Option<Vec<usize>>,
}

impl ExperimentConfig {
    /// Shadow-model spec, falling back to the victim's.
    pub fn adversary_model(&self) -> &ModelConfig {
        self.adversary_model.as_ref().unwrap_or(&self.victim_model)
    }

    /// Victim snapshot epochs: the configured list, or just the final epoch.
    pub fn checkpoints(&self) -> Vec<usize> {
        self.epoch_checkpoints.clone().unwrap_or_else(|| vec![self.victim_model.epochs])
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        let fail = |msg: String| Err(RunnerError::Config(msg));
        if self.schema_version != SCHEMA_VERSION {
            return fail(format!(
                "unsupported schema_version {} (this build reads {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        match &self.data {
            DataConfig::Synthetic {
                pool_size,
                feature_dim,
                task_shift,
                property_shift,
                cov_scale,
                phi,
            } => {
                if *pool_size < 8 {
                    return fail(format!("pool_size {pool_size} too small (need at least 8)"));
                }
                if *feature_dim < 2 {
                    return fail(format!(
                        "feature_dim {feature_dim} too small: task and property each need a feature axis"
                    ));
                }
                if !task_shift.is_finite() || !property_shift.is_finite() {
                    return fail("task_shift and property_shift must be finite".into());
                }
                if !(cov_scale.is_finite() && *cov_scale > 0.0) {
                    return fail(format!("cov_scale {cov_scale} must be positive"));
                }
                if !(phi.is_finite() && phi.abs() < 1.0) {
                    return fail(format!("phi {phi} outside (-1, 1)"));
                }
            }
            DataConfig::Csv { path, task_column, property_column } => {
                if path.is_empty() {
                    return fail("csv path is empty".into());
                }
                if task_column.is_empty() || property_column.is_empty() {
                    return fail("task_column and property_column must be named".into());
                }
                if task_column == property_column {
                    return fail("task_column and property_column must differ".into());
                }
            }
        }
        for (name, alpha) in std::iter::once(("alpha0", self.alpha0))
            .chain(self.alpha1_grid.iter().map(|a| ("alpha1_grid entry", *a)))
        {
            if !(alpha.is_finite() && (0.0..=1.0).contains(&alpha)) {
                return fail(format!("{name} {alpha} outside [0, 1]"));
            }
        }
        if self.alpha1_grid.is_empty() {
            return fail("alpha1_grid is empty".into());
        }
        if self.alpha1_grid.iter().any(|a| *a == self.alpha0) {
            return fail(format!(
                "alpha1_grid contains alpha0 ({}); the two hypotheses must differ",
                self.alpha0
            ));
        }
        // The pair {0, 1} leaves n_leaked undefined (both ratio terms of the
        // formula degenerate), so summaries could not be produced.
        if self
            .alpha1_grid
            .iter()
            .any(|a| (self.alpha0 == 0.0 && *a == 1.0) || (self.alpha0 == 1.0 && *a == 0.0))
        {
            return fail("the ratio pair (0, 1) is unsupported: n_leaked is undefined there".into());
        }
        for (i, a) in self.alpha1_grid.iter().enumerate() {
            if self.alpha1_grid[..i].contains(a) {
                return fail(format!("alpha1_grid contains {a} twice"));
            }
        }
        if self.victims_per_side == 0 || self.shadows_per_side == 0 {
            return fail("victims_per_side and shadows_per_side must be at least 1".into());
        }
        if self.trials == 0 {
            return fail("trials must be at least 1".into());
        }
        if self.train_size < 2 {
            return fail(format!("train_size {} too small", self.train_size));
        }
        if self.query_size < 2 || self.query_size % 2 != 0 {
            return fail(format!(
                "query_size {} must be even and at least 2 (half per candidate ratio)",
                self.query_size
            ));
        }
        if self.eval_size < 2 {
            return fail(format!("eval_size {} too small", self.eval_size));
        }
        if !(self.victim_fraction > 0.0 && self.victim_fraction < 1.0) {
            return fail(format!("victim_fraction {} outside (0, 1)", self.victim_fraction));
        }
        self.victim_model.check("victim_model")?;
        if let Some(adv) = &self.adversary_model {
            adv.check("adversary_model")?;
        }
        if self.attacks.is_empty() {
            return fail("attacks list is empty".into());
        }
        for (i, attack) in self.attacks.iter().enumerate() {
            if self.attacks[..i].iter().any(|a| a.kind() == attack.kind()) {
                return fail(format!("attack {} listed twice", attack.kind()));
            }
            match attack {
                AttackConfig::Kl { pair_fraction, .. } => {
                    if !(pair_fraction.is_finite() && *pair_fraction > 0.0 && *pair_fraction <= 1.0)
                    {
                        return fail(format!("kl pair_fraction {pair_fraction} outside (0, 1]"));
                    }
                }
                AttackConfig::ThresholdTest => {}
                AttackConfig::Zto { query_points, meta } => {
                    if *query_points == 0 {
                        return fail("zto query_points must be at least 1".into());
                    }
                    if let Some(meta) = meta {
                        meta.check("zto meta model")?;
                    }
                }
            }
        }
        match &self.defense {
            Some(DefenseConfig::Augment { sigma }) => {
                if !(sigma.is_finite() && *sigma >= 0.0) {
                    return fail(format!("augment sigma {sigma} must be non-negative"));
                }
            }
            Some(DefenseConfig::Poison { rate }) => {
                if !(rate.is_finite() && *rate > 0.0 && *rate < 1.0) {
                    return fail(format!("poison rate {rate} outside (0, 1)"));
                }
            }
            _ => {}
        }
        if self.same_setup_adversary && self.defense.is_none() {
            return fail("same_setup_adversary set but no defense configured".into());
        }
        match &self.access {
            AccessConfig::Confidence => {}
            AccessConfig::LabelOnlyDirect { epsilon } => check_epsilon(*epsilon)?,
            AccessConfig::LabelOnlySampling { epsilon, k, sigma } => {
                check_epsilon(*epsilon)?;
                if *k == 0 {
                    return fail("label-only sampling k must be at least 1".into());
                }
                if !(sigma.is_finite() && *sigma >= 0.0) {
                    return fail(format!("label-only sampling sigma {sigma} must be non-negative"));
                }
            }
        }
        if let Some(checkpoints) = &self.epoch_checkpoints {
            if checkpoints.is_empty() {
                return fail("epoch_checkpoints is empty; omit the field instead".into());
            }
            if checkpoints[0] == 0 {
                return fail("epoch_checkpoints must start at 1 or later".into());
            }
            if !checkpoints.windows(2).all(|w| w[0] < w[1]) {
                return fail("epoch_checkpoints must be strictly increasing".into());
            }
            if *checkpoints.last().unwrap() > self.victim_model.epochs {
                return fail(format!(
                    "last checkpoint {} exceeds victim epochs {}",
                    checkpoints.last().unwrap(),
                    self.victim_model.epochs
                ));
            }
        }
        Ok(())
    }
}

fn check_epsilon(epsilon: f64) -> Result<(), RunnerError> {
    if !(epsilon.is_finite() && epsilon > 0.0 && epsilon < 0.5) {
        return Err(RunnerError::Config(format!("label epsilon {epsilon} outside (0, 0.5)")));
    }
    Ok(())
}

/// Architecture-grid run description: a base experiment crossed with
/// victim and adversary model lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchGridConfig {
    pub experiment: ExperimentConfig,
    pub victim_models: Vec<ModelConfig>,
    pub adversary_models: Vec<ModelConfig>,
}

impl ArchGridConfig {
    pub fn validate(&self) -> Result<(), RunnerError> {
        self.experiment.validate()?;
        if self.victim_models.is_empty() || self.adversary_models.is_empty() {
            return Err(RunnerError::Config(
                "victim_models and adversary_models must be non-empty".into(),
            ));
        }
        for (i, m) in self.victim_models.iter().enumerate() {
            m.check(&format!("victim_models[{i}]"))?;
        }
        for (i, m) in self.adversary_models.iter().enumerate() {
            m.check(&format!("adversary_models[{i}]"))?;
        }
        Ok(())
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, RunnerError> {
    // An unreadable config is a config error (exit 2), not a runtime one.
    let text = fs::read_to_string(path)
        .map_err(|e| RunnerError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| RunnerError::Parse { path: path.to_path_buf(), source: e })
}

/// Loads and validates an experiment config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, RunnerError> {
    let config: ExperimentConfig = read_json(path)?;
    config.validate()?;
    Ok(config)
}

/// Loads and validates an architecture-grid config file.
pub fn load_arch_grid_config(path: &Path) -> Result<ArchGridConfig, RunnerError> {
    let config: ArchGridConfig = read_json(path)?;
    config.validate()?;
    Ok(config)
}
