//! End-to-end experiment orchestration.
//!
//! [`run_experiment`] turns a declarative config into a report: generate or
//! load the data pool, split it into disjoint victim/adversary halves, then
//! for every (α1, trial) cell train victim fleets at α0 and α1, train shadow
//! fleets, query everything, run the configured attacks on each victim, and
//! aggregate (median over trials, mean over the grid, n_leaked from the
//! medians).
//!
//! Every random choice flows from `master_seed` through [`crate::seed`]
//! with a path naming the cell, role, and member index, so reports are
//! byte-identical across reruns and across any number of worker threads.
//! Failed cells become entries in the report's failure list instead of
//! aborting the run; completed cells are still aggregated and persisted.

pub mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptive::{AdaptiveError, CampaignResult, OracleMode};
use crate::attacks::{
    self, AttackError, AttackKind, AttackVerdict, KlOptions, QueryBundle, ThresholdRule, ZtoMeta,
    DEFAULT_PROB_FLOOR,
};
use crate::datagen::{
    self, BaseDistributionSpec, DataError, DatasetTable, RatioTransformer,
};
use crate::matrix::Matrix;
use crate::metrics::{self, FairnessReport, MetricError};
use crate::models::{self, ModelError, PredictionMatrix, TrainedModel};
use crate::seed::{self, Stream};

pub use config::{
    load_arch_grid_config, load_config, AccessConfig, ArchConfig, ArchGridConfig, AttackConfig,
    DataConfig, DefenseConfig, ExperimentConfig, ModelConfig, SCHEMA_VERSION,
};

/// Errors from experiment orchestration and artifact emission.
#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("config error: {0}")]
    Config(String),
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("failed to write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to write csv {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<RunnerError>,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Adaptive(#[from] AdaptiveError),
    #[error("json serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

impl RunnerError {
    /// CLI exit code: 2 for configuration problems, 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunnerError::Config(_) | RunnerError::Parse { .. } => 2,
            RunnerError::Context { source, .. } => source.exit_code(),
            _ => 3,
        }
    }

    fn context(self, context: impl Into<String>) -> RunnerError {
        RunnerError::Context { context: context.into(), source: Box::new(self) }
    }
}

// Seed-path role tags keeping every fleet's random streams disjoint.
const ROLE_VICTIM_G0: u64 = 0;
const ROLE_VICTIM_G1: u64 = 1;
const ROLE_SHADOW_G0: u64 = 2;
const ROLE_SHADOW_G1: u64 = 3;

// Query-surface tags separating noise streams for the two feature sets a
// label-only sampler may probe.
const SURFACE_MAIN: u64 = 0;
const SURFACE_ZTO: u64 = 1;

/// Accuracy of one attack within one cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackAccuracy {
    pub attack: String,
    pub accuracy: f64,
}

/// One per-victim attack decision, as logged to verdicts.csv.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub victim_id: String,
    pub attack: String,
    pub alpha0: f64,
    pub alpha1: f64,
    pub predicted_bit: u8,
    pub score: f64,
    pub trial: usize,
    /// The victim's derived training seed, identifying the exact model.
    pub seed: u64,
}

/// Results of one (α1, trial) cell at the final checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialCell {
    pub alpha1: f64,
    pub trial: usize,
    /// Victim training epoch the attacks ran against.
    pub epoch: usize,
    pub attack_accuracies: Vec<AttackAccuracy>,
    /// Mean victim task accuracy on the balanced eval table, per fleet.
    pub task_accuracy_g0: f64,
    pub task_accuracy_g1: f64,
    /// Present when a defense is configured: defended G1 victims versus an
    /// undefended twin fleet trained on the same data draws.
    pub fairness: Option<FairnessReport>,
}

/// Median accuracy and leakage for one (α1, attack) pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LeakageSummary {
    pub alpha0: f64,
    pub alpha1: f64,
    pub attack: String,
    pub accuracy_median: f64,
    pub nleaked: f64,
    pub saturated: bool,
    /// Completed trials backing the median.
    pub trials: usize,
}

/// Grid-level aggregate for one attack.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridMean {
    pub attack: String,
    pub mean_accuracy: f64,
    pub mean_nleaked: f64,
    pub any_saturated: bool,
}

/// A cell that errored; the rest of the run continues without it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellFailure {
    pub alpha1: f64,
    pub trial: usize,
    pub message: String,
}

/// Everything a run produced. Serializes byte-identically for a fixed
/// config, so reports can be diffed across machines.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub cells: Vec<TrialCell>,
    pub summaries: Vec<LeakageSummary>,
    pub grid_means: Vec<GridMean>,
    pub verdicts: Vec<VerdictRecord>,
    pub failures: Vec<CellFailure>,
}

/// One point of an epoch sweep: attacks evaluated against victim snapshots
/// at `epoch`, aggregated over the α grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepPoint {
    pub epoch: usize,
    pub attack: String,
    pub mean_accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepReport {
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub points: Vec<SweepPoint>,
    pub failures: Vec<CellFailure>,
}

/// One victim-spec × adversary-spec cell of an architecture grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArchCell {
    pub victim_arch: String,
    pub adversary_arch: String,
    pub attack_means: Vec<AttackAccuracy>,
    /// Mean over attacks of the grid-mean accuracies; absent when every
    /// cell of the underlying run failed.
    pub mean_accuracy: Option<f64>,
    pub failed_cells: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArchGridReport {
    pub tool_version: String,
    pub experiment: ExperimentConfig,
    pub victim_models: Vec<ModelConfig>,
    pub adversary_models: Vec<ModelConfig>,
    pub cells: Vec<ArchCell>,
}

fn tool_version() -> String {
    env!("CARGO_PKG_VERSION").to_string()
}

/// Disjoint data pools for the two parties.
struct PreparedData {
    victim_pool: DatasetTable,
    adversary_pool: DatasetTable,
}

fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData, RunnerError> {
    let pool = match &cfg.data {
        DataConfig::Synthetic {
            pool_size,
            feature_dim,
            task_shift,
            property_shift,
            cov_scale,
            phi,
        } => {
            let spec = BaseDistributionSpec::axis_aligned(
                *feature_dim,
                *task_shift,
                *property_shift,
                *cov_scale,
                datagen::task_mix_for_phi(*phi),
            );
            // A balanced pool keeps every grid ratio reachable from both
            // sides by subsampling.
            datagen::synth_generate(
                &spec,
                *pool_size,
                0.5,
                seed::derive(cfg.master_seed, Stream::Pool, &[]),
            )?
        }
        DataConfig::Csv { path, task_column, property_column } => {
            datagen::load_csv(Path::new(path), task_column, property_column)?
        }
    };
    let (victim_pool, adversary_pool) = datagen::split_victim_adversary(
        &pool,
        cfg.victim_fraction,
        seed::derive(cfg.master_seed, Stream::Split, &[]),
    )?;
    Ok(PreparedData { victim_pool, adversary_pool })
}

fn apply_defense(
    defense: &DefenseConfig,
    table: &DatasetTable,
    decoy_alpha: f64,
    seed_value: u64,
) -> Result<DatasetTable, DataError> {
    match defense {
        DefenseConfig::Undersample => datagen::undersample(table, decoy_alpha, seed_value),
        DefenseConfig::Oversample => datagen::oversample(table, decoy_alpha, seed_value),
        DefenseConfig::Augment { sigma } => {
            datagen::augment_oversample(table, decoy_alpha, *sigma, seed_value)
        }
        DefenseConfig::Poison { rate } => datagen::poison_labels(table, *rate, seed_value),
    }
}

/// Samples, optionally defends, and trains one fleet member, snapshotting
/// the listed epochs. Everything derives from (master, cell, role, index).
#[allow(clippy::too_many_arguments)]
fn train_member(
    cfg: &ExperimentConfig,
    pool: &DatasetTable,
    alpha: f64,
    g: u64,
    t: u64,
    role: u64,
    index: usize,
    model: &ModelConfig,
    defense: Option<&DefenseConfig>,
    snapshots: &[usize],
) -> Result<Vec<TrainedModel>, RunnerError> {
    let path = [g, t, role, index as u64];
    let mut table = datagen::apply_ratio(
        pool,
        &RatioTransformer { alpha, size: cfg.train_size },
        seed::derive(cfg.master_seed, Stream::FleetSample, &path),
    )?;
    if let Some(defense) = defense {
        // The decoy is always α0: the defender hides whatever its true
        // ratio is behind the null-hypothesis ratio.
        table = apply_defense(
            defense,
            &table,
            cfg.alpha0,
            seed::derive(cfg.master_seed, Stream::Defense, &path),
        )?;
    }
    let spec = model.to_spec(seed::derive(cfg.master_seed, Stream::FleetTrain, &path));
    Ok(models::train_with_checkpoints(&spec, &table, snapshots)?)
}

/// Queries one model through the configured access surface.
#[allow(clippy::too_many_arguments)]
fn access_predictions(
    cfg: &ExperimentConfig,
    model: &TrainedModel,
    features: &Matrix,
    g: u64,
    t: u64,
    role: u64,
    index: usize,
    surface: u64,
) -> Result<PredictionMatrix, RunnerError> {
    match &cfg.access {
        AccessConfig::Confidence => Ok(models::predict_proba(model, features)?),
        AccessConfig::LabelOnlyDirect { epsilon } => {
            let labels = models::predict_labels(model, features)?;
            Ok(attacks::label_only_transform(&labels, *epsilon)?)
        }
        AccessConfig::LabelOnlySampling { epsilon, k, sigma } => {
            let noise_seed = seed::derive(
                cfg.master_seed,
                Stream::AccessNoise,
                &[g, t, role, index as u64, surface],
            );
            Ok(attacks::neighborhood_confidence(model, features, *k, *sigma, *epsilon, noise_seed)?)
        }
    }
}

/// Sequential fold of parallel results: the first error by task index wins,
/// so failure messages never depend on thread scheduling.
fn collect_first<T>(results: Vec<Result<T, RunnerError>>) -> Result<Vec<T>, RunnerError> {
    let mut out = Vec::with_capacity(results.len());
    for result in results {
        out.push(result?);
    }
    Ok(out)
}

/// Internal per-cell result holding every checkpoint, from which both the
/// plain report and the epoch sweep are assembled.
struct CellOutput {
    grid_index: usize,
    alpha1: f64,
    trial: usize,
    checkpoints: Vec<CheckpointResult>,
    task_accuracy_g0: f64,
    task_accuracy_g1: f64,
    fairness: Option<FairnessReport>,
}

struct CheckpointResult {
    epoch: usize,
    attacks: Vec<AttackCellResult>,
}

struct AttackCellResult {
    kind: AttackKind,
    accuracy: f64,
    verdicts: Vec<VerdictRecord>,
}

/// Per-victim verdicts across checkpoints, in config attack order.
struct VictimEval {
    side: usize,
    index: usize,
    train_seed: u64,
    per_checkpoint: Vec<Vec<AttackVerdict>>,
}

/// Fitted attack state shared by every victim in a cell.
struct CellAttacks<'a> {
    cfg: &'a ExperimentConfig,
    bundle: Option<QueryBundle>,
    shadow_main_g0: Vec<PredictionMatrix>,
    shadow_main_g1: Vec<PredictionMatrix>,
    tt_rule: Option<ThresholdRule>,
    tt_eval: DatasetTable,
    zto_meta: Option<ZtoMeta>,
    zto_features: Option<Matrix>,
}

impl CellAttacks<'_> {
    /// Runs every configured attack against one victim snapshot.
    fn evaluate(
        &self,
        model: &TrainedModel,
        g: u64,
        t: u64,
        role: u64,
        index: usize,
    ) -> Result<Vec<AttackVerdict>, RunnerError> {
        let cfg = self.cfg;
        let mut verdicts = Vec::with_capacity(cfg.attacks.len());
        let mut main_preds: Option<PredictionMatrix> = None;
        for attack in &cfg.attacks {
            let verdict = match attack {
                AttackConfig::Kl { pair_fraction, vote_mode, flip_kl } => {
                    if main_preds.is_none() {
                        let bundle = self.bundle.as_ref().expect("bundle built when kl configured");
                        main_preds = Some(access_predictions(
                            cfg,
                            model,
                            &bundle.features,
                            g,
                            t,
                            role,
                            index,
                            SURFACE_MAIN,
                        )?);
                    }
                    let opts = KlOptions {
                        pair_fraction: *pair_fraction,
                        vote_mode: *vote_mode,
                        flip_kl: *flip_kl,
                        prob_floor: DEFAULT_PROB_FLOOR,
                        seed: seed::derive(
                            cfg.master_seed,
                            Stream::PairSubsample,
                            &[g, t, role, index as u64],
                        ),
                    };
                    attacks::kl_attack(
                        main_preds.as_ref().unwrap(),
                        &self.shadow_main_g0,
                        &self.shadow_main_g1,
                        &opts,
                    )?
                }
                AttackConfig::ThresholdTest => {
                    let rule = self.tt_rule.as_ref().expect("rule fitted when tt configured");
                    rule.classify(models::accuracy(model, &self.tt_eval)?)
                }
                AttackConfig::Zto { .. } => {
                    let meta = self.zto_meta.as_ref().expect("meta fitted when zto configured");
                    let features =
                        self.zto_features.as_ref().expect("zto features sampled with meta");
                    let preds = access_predictions(
                        cfg, model, features, g, t, role, index, SURFACE_ZTO,
                    )?;
                    meta.classify(&preds)?
                }
            };
            verdicts.push(verdict);
        }
        Ok(verdicts)
    }
}

fn run_cell(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    grid_index: usize,
    alpha1: f64,
    trial: usize,
) -> Result<CellOutput, RunnerError> {
    let g = grid_index as u64;
    let t = trial as u64;
    let snapshots = cfg.checkpoints();
    let adversary_model = cfg.adversary_model();
    let shadow_snapshots = vec![adversary_model.epochs];
    let shadow_defense = if cfg.same_setup_adversary { cfg.defense.as_ref() } else { None };

    let wants_kl = cfg.attacks.iter().any(|a| matches!(a, AttackConfig::Kl { .. }));
    let wants_tt = cfg.attacks.iter().any(|a| matches!(a, AttackConfig::ThresholdTest));
    let zto_request = cfg.attacks.iter().find_map(|a| match a {
        AttackConfig::Zto { query_points, meta } => Some((*query_points, meta.clone())),
        _ => None,
    });

    // Adversary-side query material: two labeled halves at the candidate
    // ratios serve both the mixed query bundle and the threshold test's
    // evaluation table.
    let half = cfg.query_size / 2;
    let query_g0 = datagen::apply_ratio(
        &data.adversary_pool,
        &RatioTransformer { alpha: cfg.alpha0, size: half },
        seed::derive(cfg.master_seed, Stream::Query, &[g, t, 0]),
    )
    .map_err(|e| RunnerError::from(e).context("query sample at alpha0"))?;
    let query_g1 = datagen::apply_ratio(
        &data.adversary_pool,
        &RatioTransformer { alpha: alpha1, size: half },
        seed::derive(cfg.master_seed, Stream::Query, &[g, t, 1]),
    )
    .map_err(|e| RunnerError::from(e).context("query sample at alpha1"))?;
    let tt_eval = DatasetTable::concat(&query_g0, &query_g1);
    let bundle = if wants_kl {
        Some(QueryBundle::from_halves(
            &query_g0.features,
            &query_g1.features,
            format!("adversary pool, {} rows per ratio", half),
        )?)
    } else {
        None
    };
    let zto_features = match &zto_request {
        Some((points, _)) => Some(
            datagen::apply_ratio(
                &data.adversary_pool,
                &RatioTransformer { alpha: 0.5 * (cfg.alpha0 + alpha1), size: *points },
                seed::derive(cfg.master_seed, Stream::ZtoQuery, &[g, t]),
            )
            .map_err(|e| RunnerError::from(e).context("zto query sample"))?
            .features,
        ),
        None => None,
    };
    let task_eval = datagen::apply_ratio(
        &data.adversary_pool,
        &RatioTransformer { alpha: 0.5, size: cfg.eval_size },
        seed::derive(cfg.master_seed, Stream::Eval, &[g, t]),
    )
    .map_err(|e| RunnerError::from(e).context("balanced eval sample"))?;

    // Fleets. Victims snapshot every configured checkpoint; shadows train
    // straight to their own final epoch.
    let build_fleet = |pool: &DatasetTable,
                       alpha: f64,
                       role: u64,
                       count: usize,
                       model: &ModelConfig,
                       defense: Option<&DefenseConfig>,
                       snaps: &[usize],
                       what: &str|
     -> Result<Vec<Vec<TrainedModel>>, RunnerError> {
        let results: Vec<Result<Vec<TrainedModel>, RunnerError>> = (0..count)
            .into_par_iter()
            .map(|i| {
                train_member(cfg, pool, alpha, g, t, role, i, model, defense, snaps)
                    .map_err(|e| e.context(format!("{what} member {i}")))
            })
            .collect();
        collect_first(results)
    };

    let victims_g0 = build_fleet(
        &data.victim_pool,
        cfg.alpha0,
        ROLE_VICTIM_G0,
        cfg.victims_per_side,
        &cfg.victim_model,
        cfg.defense.as_ref(),
        &snapshots,
        "victim fleet g0",
    )?;
    let victims_g1 = build_fleet(
        &data.victim_pool,
        alpha1,
        ROLE_VICTIM_G1,
        cfg.victims_per_side,
        &cfg.victim_model,
        cfg.defense.as_ref(),
        &snapshots,
        "victim fleet g1",
    )?;
    let shadows_g0: Vec<TrainedModel> = build_fleet(
        &data.adversary_pool,
        cfg.alpha0,
        ROLE_SHADOW_G0,
        cfg.shadows_per_side,
        adversary_model,
        shadow_defense,
        &shadow_snapshots,
        "shadow fleet g0",
    )?
    .into_iter()
    .map(|mut snaps| snaps.pop().expect("one snapshot requested"))
    .collect();
    let shadows_g1: Vec<TrainedModel> = build_fleet(
        &data.adversary_pool,
        alpha1,
        ROLE_SHADOW_G1,
        cfg.shadows_per_side,
        adversary_model,
        shadow_defense,
        &shadow_snapshots,
        "shadow fleet g1",
    )?
    .into_iter()
    .map(|mut snaps| snaps.pop().expect("one snapshot requested"))
    .collect();

    // Shadow predictions and per-cell attack fitting.
    let shadow_predictions = |models: &[TrainedModel],
                              role: u64,
                              features: &Matrix,
                              surface: u64,
                              what: &str|
     -> Result<Vec<PredictionMatrix>, RunnerError> {
        let results: Vec<Result<PredictionMatrix, RunnerError>> = models
            .par_iter()
            .enumerate()
            .map(|(i, model)| {
                access_predictions(cfg, model, features, g, t, role, i, surface)
                    .map_err(|e| e.context(format!("{what} member {i}")))
            })
            .collect();
        collect_first(results)
    };

    let (shadow_main_g0, shadow_main_g1) = match &bundle {
        Some(bundle) => (
            shadow_predictions(
                &shadows_g0,
                ROLE_SHADOW_G0,
                &bundle.features,
                SURFACE_MAIN,
                "shadow queries g0",
            )?,
            shadow_predictions(
                &shadows_g1,
                ROLE_SHADOW_G1,
                &bundle.features,
                SURFACE_MAIN,
                "shadow queries g1",
            )?,
        ),
        None => (Vec::new(), Vec::new()),
    };

    let tt_rule = if wants_tt {
        let accuracies = |list: &[TrainedModel]| -> Result<Vec<f64>, RunnerError> {
            list.iter().map(|m| Ok(models::accuracy(m, &tt_eval)?)).collect()
        };
        Some(attacks::fit_threshold(&accuracies(&shadows_g0)?, &accuracies(&shadows_g1)?)?)
    } else {
        None
    };

    let zto_meta = match (&zto_request, &zto_features) {
        (Some((_, meta_cfg)), Some(features)) => {
            let preds_g0 = shadow_predictions(
                &shadows_g0,
                ROLE_SHADOW_G0,
                features,
                SURFACE_ZTO,
                "zto shadow queries g0",
            )?;
            let preds_g1 = shadow_predictions(
                &shadows_g1,
                ROLE_SHADOW_G1,
                features,
                SURFACE_ZTO,
                "zto shadow queries g1",
            )?;
            let meta_model = meta_cfg.clone().unwrap_or_else(default_zto_meta);
            let spec = meta_model.to_spec(seed::derive(cfg.master_seed, Stream::ZtoMeta, &[g, t]));
            Some(
                attacks::fit_zto_meta(&preds_g0, &preds_g1, &spec)
                    .map_err(|e| RunnerError::from(e).context("zto meta training"))?,
            )
        }
        _ => None,
    };

    let cell_attacks = CellAttacks {
        cfg,
        bundle,
        shadow_main_g0,
        shadow_main_g1,
        tt_rule,
        tt_eval,
        zto_meta,
        zto_features,
    };

    // Attack every victim snapshot. Results are keyed by (side, index), so
    // the parallel schedule cannot reorder anything observable.
    let eval_results: Vec<Result<VictimEval, RunnerError>> = [&victims_g0, &victims_g1]
        .into_iter()
        .enumerate()
        .flat_map(|(side, fleet)| {
            fleet.iter().enumerate().map(move |(index, snaps)| (side, index, snaps))
        })
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(side, index, snaps)| {
            let role = side as u64;
            let mut per_checkpoint = Vec::with_capacity(snaps.len());
            for model in snaps {
                per_checkpoint.push(
                    cell_attacks
                        .evaluate(model, g, t, role, index)
                        .map_err(|e| e.context(format!("attacks on victim g{side} member {index}")))?,
                );
            }
            Ok(VictimEval {
                side,
                index,
                train_seed: seed::derive(
                    cfg.master_seed,
                    Stream::FleetTrain,
                    &[g, t, role, index as u64],
                ),
                per_checkpoint,
            })
        })
        .collect();
    let evals = collect_first(eval_results)?;

    let mut checkpoints = Vec::with_capacity(snapshots.len());
    for (ci, &epoch) in snapshots.iter().enumerate() {
        let mut per_attack = Vec::with_capacity(cfg.attacks.len());
        for (ai, attack) in cfg.attacks.iter().enumerate() {
            let mut correct = 0usize;
            let mut verdicts = Vec::with_capacity(evals.len());
            for eval in &evals {
                let verdict = &eval.per_checkpoint[ci][ai];
                correct += usize::from(verdict.predicted_bit == eval.side as u8);
                verdicts.push(VerdictRecord {
                    victim_id: format!("g{}-{:02}", eval.side, eval.index),
                    attack: attack.kind().to_string(),
                    alpha0: cfg.alpha0,
                    alpha1,
                    predicted_bit: verdict.predicted_bit,
                    score: verdict.score,
                    trial,
                    seed: eval.train_seed,
                });
            }
            per_attack.push(AttackCellResult {
                kind: attack.kind(),
                accuracy: correct as f64 / evals.len() as f64,
                verdicts,
            });
        }
        checkpoints.push(CheckpointResult { epoch, attacks: per_attack });
    }

    // Victim utility on the balanced eval table (final snapshots).
    let fleet_task_accuracy = |fleet: &[Vec<TrainedModel>]| -> Result<f64, RunnerError> {
        let mut sum = 0.0;
        for snaps in fleet {
            sum += models::accuracy(snaps.last().expect("non-empty snapshots"), &task_eval)?;
        }
        Ok(sum / fleet.len() as f64)
    };
    let task_accuracy_g0 = fleet_task_accuracy(&victims_g0)?;
    let task_accuracy_g1 = fleet_task_accuracy(&victims_g1)?;

    // Fairness: defended G1 victims against an undefended twin fleet that
    // saw the same data draws and training seeds.
    let fairness = if cfg.defense.is_some() {
        let final_epoch = [*snapshots.last().expect("non-empty checkpoints")];
        let baseline_results: Vec<Result<TrainedModel, RunnerError>> = (0..cfg.victims_per_side)
            .into_par_iter()
            .map(|i| {
                train_member(
                    cfg,
                    &data.victim_pool,
                    alpha1,
                    g,
                    t,
                    ROLE_VICTIM_G1,
                    i,
                    &cfg.victim_model,
                    None,
                    &final_epoch,
                )
                .map(|mut snaps| snaps.pop().expect("one snapshot requested"))
                .map_err(|e| e.context(format!("fairness baseline member {i}")))
            })
            .collect();
        let baseline = collect_first(baseline_results)?;
        let defended: Vec<TrainedModel> =
            victims_g1.iter().map(|snaps| snaps.last().expect("non-empty").clone()).collect();
        Some(metrics::fairness_impact(&baseline, &defended, &task_eval)?)
    } else {
        None
    };

    Ok(CellOutput {
        grid_index,
        alpha1,
        trial,
        checkpoints,
        task_accuracy_g0,
        task_accuracy_g1,
        fairness,
    })
}

fn default_zto_meta() -> ModelConfig {
    ModelConfig {
        arch: ArchConfig::Linear,
        epochs: 100,
        learning_rate: 0.05,
        batch_size: 32,
        l2_penalty: 1e-4,
    }
}

/// Runs every (α1, trial) cell. Cell failures are collected, not fatal;
/// only config and pool-preparation problems abort the run.
fn run_cells(cfg: &ExperimentConfig) -> Result<(Vec<CellOutput>, Vec<CellFailure>), RunnerError> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for (grid_index, &alpha1) in cfg.alpha1_grid.iter().enumerate() {
        for trial in 0..cfg.trials {
            match run_cell(cfg, &data, grid_index, alpha1, trial) {
                Ok(cell) => cells.push(cell),
                Err(e) => {
                    failures.push(CellFailure { alpha1, trial, message: e.to_string() })
                }
            }
        }
    }
    Ok((cells, failures))
}

/// Full experiment: train, attack, aggregate. The returned report is a pure
/// function of the config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, RunnerError> {
    let (cells, failures) = run_cells(cfg)?;
    let report = assemble_report(cfg, &cells, failures)?;
    Ok(report)
}

fn assemble_report(
    cfg: &ExperimentConfig,
    cells: &[CellOutput],
    failures: Vec<CellFailure>,
) -> Result<ExperimentReport, RunnerError> {
    let mut summaries = Vec::new();
    for (grid_index, &alpha1) in cfg.alpha1_grid.iter().enumerate() {
        for (ai, attack) in cfg.attacks.iter().enumerate() {
            let trial_accuracies: Vec<f64> = cells
                .iter()
                .filter(|c| c.grid_index == grid_index)
                .map(|c| c.checkpoints.last().expect("non-empty checkpoints").attacks[ai].accuracy)
                .collect();
            if trial_accuracies.is_empty() {
                continue;
            }
            let accuracy_median = metrics::median(&trial_accuracies)?;
            let nleaked = metrics::nleaked_binary(accuracy_median, cfg.alpha0, alpha1)?;
            summaries.push(LeakageSummary {
                alpha0: cfg.alpha0,
                alpha1,
                attack: attack.kind().to_string(),
                accuracy_median,
                nleaked: nleaked.value,
                saturated: nleaked.saturated,
                trials: trial_accuracies.len(),
            });
        }
    }

    let mut grid_means = Vec::new();
    for attack in &cfg.attacks {
        let name = attack.kind().to_string();
        let rows: Vec<&LeakageSummary> = summaries.iter().filter(|s| s.attack == name).collect();
        if rows.is_empty() {
            continue;
        }
        let accuracies: Vec<f64> = rows.iter().map(|s| s.accuracy_median).collect();
        let nleakeds: Vec<f64> = rows.iter().map(|s| s.nleaked).collect();
        grid_means.push(GridMean {
            attack: name,
            mean_accuracy: metrics::mean_over_grid(&accuracies)?,
            mean_nleaked: metrics::mean_over_grid(&nleakeds)?,
            any_saturated: rows.iter().any(|s| s.saturated),
        });
    }

    let mut verdicts = Vec::new();
    let mut trial_cells = Vec::with_capacity(cells.len());
    for cell in cells {
        let last = cell.checkpoints.last().expect("non-empty checkpoints");
        for attack in &last.attacks {
            verdicts.extend(attack.verdicts.iter().cloned());
        }
        trial_cells.push(TrialCell {
            alpha1: cell.alpha1,
            trial: cell.trial,
            epoch: last.epoch,
            attack_accuracies: last
                .attacks
                .iter()
                .map(|a| AttackAccuracy { attack: a.kind.to_string(), accuracy: a.accuracy })
                .collect(),
            task_accuracy_g0: cell.task_accuracy_g0,
            task_accuracy_g1: cell.task_accuracy_g1,
            fairness: cell.fairness.clone(),
        });
    }

    Ok(ExperimentReport {
        tool_version: tool_version(),
        config: cfg.clone(),
        cells: trial_cells,
        summaries,
        grid_means,
        verdicts,
        failures,
    })
}

/// Attacks evaluated against every victim training snapshot in the config's
/// checkpoint list, aggregated like the main report (median over trials,
/// mean over the grid) per epoch.
pub fn run_epoch_sweep(cfg: &ExperimentConfig) -> Result<SweepReport, RunnerError> {
    if cfg.epoch_checkpoints.is_none() {
        return Err(RunnerError::Config(
            "epoch_checkpoints must be set for an epoch sweep".into(),
        ));
    }
    let (cells, failures) = run_cells(cfg)?;
    let snapshots = cfg.checkpoints();
    let mut points = Vec::new();
    for (ci, &epoch) in snapshots.iter().enumerate() {
        for (ai, attack) in cfg.attacks.iter().enumerate() {
            let mut per_alpha = Vec::new();
            for grid_index in 0..cfg.alpha1_grid.len() {
                let trial_accuracies: Vec<f64> = cells
                    .iter()
                    .filter(|c| c.grid_index == grid_index)
                    .map(|c| c.checkpoints[ci].attacks[ai].accuracy)
                    .collect();
                if !trial_accuracies.is_empty() {
                    per_alpha.push(metrics::median(&trial_accuracies)?);
                }
            }
            if per_alpha.is_empty() {
                continue;
            }
            points.push(SweepPoint {
                epoch,
                attack: attack.kind().to_string(),
                mean_accuracy: metrics::mean_over_grid(&per_alpha)?,
            });
        }
    }
    Ok(SweepReport { tool_version: tool_version(), config: cfg.clone(), points, failures })
}

/// One full experiment per (victim spec, adversary spec) pair, all sharing
/// the base config's data seeds so only the architectures differ.
pub fn run_architecture_grid(
    base: &ExperimentConfig,
    victim_models: &[ModelConfig],
    adversary_models: &[ModelConfig],
) -> Result<ArchGridReport, RunnerError> {
    if victim_models.is_empty() || adversary_models.is_empty() {
        return Err(RunnerError::Config(
            "victim_models and adversary_models must be non-empty".into(),
        ));
    }
    let mut cells = Vec::with_capacity(victim_models.len() * adversary_models.len());
    for victim in victim_models {
        for adversary in adversary_models {
            let mut cfg = base.clone();
            cfg.victim_model = victim.clone();
            cfg.adversary_model = Some(adversary.clone());
            cfg.validate().map_err(|e| {
                e.context(format!(
                    "grid cell victim={} adversary={}",
                    victim.arch.label(),
                    adversary.arch.label()
                ))
            })?;
            let report = run_experiment(&cfg)?;
            let attack_means: Vec<AttackAccuracy> = report
                .grid_means
                .iter()
                .map(|gm| AttackAccuracy { attack: gm.attack.clone(), accuracy: gm.mean_accuracy })
                .collect();
            let mean_accuracy = if attack_means.is_empty() {
                None
            } else {
                Some(metrics::mean_over_grid(
                    &attack_means.iter().map(|a| a.accuracy).collect::<Vec<f64>>(),
                )?)
            };
            cells.push(ArchCell {
                victim_arch: victim.arch.label(),
                adversary_arch: adversary.arch.label(),
                attack_means,
                mean_accuracy,
                failed_cells: report.failures.len(),
            });
        }
    }
    Ok(ArchGridReport {
        tool_version: tool_version(),
        experiment: base.clone(),
        victim_models: victim_models.to_vec(),
        adversary_models: adversary_models.to_vec(),
        cells,
    })
}

// ---------------------------------------------------------------------------
// Artifact emission
// ---------------------------------------------------------------------------

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), RunnerError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| RunnerError::Write { path: path.to_path_buf(), source: e })
}

/// Shortest decimal form that parses back to the same float, so CSV bytes
/// are stable and lossless.
fn fmt_float(v: f64) -> String {
    format!("{v}")
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), RunnerError> {
    let wrap = |e: csv::Error| RunnerError::Csv { path: path.to_path_buf(), source: e };
    let mut writer = csv::Writer::from_path(path).map_err(wrap)?;
    writer.write_record(header).map_err(wrap)?;
    for row in rows {
        writer.write_record(row).map_err(wrap)?;
    }
    writer
        .into_inner()
        .map_err(|e| RunnerError::Write {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        })?
        .flush()
        .map_err(|e| RunnerError::Write { path: path.to_path_buf(), source: e })
}

fn ensure_dir(out_dir: &Path) -> Result<(), RunnerError> {
    fs::create_dir_all(out_dir)
        .map_err(|e| RunnerError::Write { path: out_dir.to_path_buf(), source: e })
}

/// Clears or writes the failure manifest so a clean rerun never leaves a
/// stale manifest behind.
fn write_failures(failures: &[CellFailure], out_dir: &Path) -> Result<Option<PathBuf>, RunnerError> {
    let path = out_dir.join("failure_manifest.json");
    if failures.is_empty() {
        let _ = fs::remove_file(&path);
        Ok(None)
    } else {
        write_json(&failures, &path)?;
        Ok(Some(path))
    }
}

/// Writes report.json, summary.csv, verdicts.csv, series.csv (and a failure
/// manifest when cells failed) into `out_dir`. Overwrites are idempotent:
/// the same report always produces the same bytes.
pub fn emit_outputs(report: &ExperimentReport, out_dir: &Path) -> Result<Vec<PathBuf>, RunnerError> {
    ensure_dir(out_dir)?;
    let mut written = Vec::new();

    let report_path = out_dir.join("report.json");
    write_json(report, &report_path)?;
    written.push(report_path);

    let summary_rows: Vec<Vec<String>> = report
        .summaries
        .iter()
        .map(|s| {
            vec![
                fmt_float(s.alpha0),
                fmt_float(s.alpha1),
                s.attack.clone(),
                fmt_float(s.accuracy_median),
                fmt_float(s.nleaked),
                s.trials.to_string(),
                u8::from(s.saturated).to_string(),
            ]
        })
        .collect();
    let summary_path = out_dir.join("summary.csv");
    write_csv(
        &summary_path,
        &["alpha0", "alpha1", "attack", "accuracy_median", "nleaked", "trials", "saturated_flag"],
        &summary_rows,
    )?;
    written.push(summary_path);

    let verdict_rows: Vec<Vec<String>> = report
        .verdicts
        .iter()
        .map(|v| {
            vec![
                v.victim_id.clone(),
                v.attack.clone(),
                fmt_float(v.alpha0),
                fmt_float(v.alpha1),
                v.predicted_bit.to_string(),
                fmt_float(v.score),
                v.trial.to_string(),
                v.seed.to_string(),
            ]
        })
        .collect();
    let verdicts_path = out_dir.join("verdicts.csv");
    write_csv(
        &verdicts_path,
        &["victim_id", "attack", "alpha0", "alpha1", "predicted_bit", "score", "trial", "seed"],
        &verdict_rows,
    )?;
    written.push(verdicts_path);

    // Plot-ready curves: one series per attack, x = alpha1.
    let mut series_rows = Vec::new();
    for attack in &report.config.attacks {
        let name = attack.kind().to_string();
        for summary in report.summaries.iter().filter(|s| s.attack == name) {
            series_rows.push(vec![
                name.clone(),
                fmt_float(summary.alpha1),
                fmt_float(summary.accuracy_median),
            ]);
        }
    }
    let series_path = out_dir.join("series.csv");
    write_csv(&series_path, &["series", "x", "y"], &series_rows)?;
    written.push(series_path);

    if let Some(path) = write_failures(&report.failures, out_dir)? {
        written.push(path);
    }
    Ok(written)
}

/// Writes sweep_report.json and series.csv (x = epoch) into `out_dir`.
pub fn emit_sweep(report: &SweepReport, out_dir: &Path) -> Result<Vec<PathBuf>, RunnerError> {
    ensure_dir(out_dir)?;
    let mut written = Vec::new();

    let report_path = out_dir.join("sweep_report.json");
    write_json(report, &report_path)?;
    written.push(report_path);

    let rows: Vec<Vec<String>> = report
        .points
        .iter()
        .map(|p| vec![p.attack.clone(), p.epoch.to_string(), fmt_float(p.mean_accuracy)])
        .collect();
    let series_path = out_dir.join("series.csv");
    write_csv(&series_path, &["series", "x", "y"], &rows)?;
    written.push(series_path);

    if let Some(path) = write_failures(&report.failures, out_dir)? {
        written.push(path);
    }
    Ok(written)
}

/// Writes arch_grid.json and arch_grid.csv into `out_dir`.
pub fn emit_arch_grid(report: &ArchGridReport, out_dir: &Path) -> Result<Vec<PathBuf>, RunnerError> {
    ensure_dir(out_dir)?;
    let mut written = Vec::new();

    let report_path = out_dir.join("arch_grid.json");
    write_json(report, &report_path)?;
    written.push(report_path);

    let mut rows = Vec::new();
    for cell in &report.cells {
        for mean in &cell.attack_means {
            rows.push(vec![
                cell.victim_arch.clone(),
                cell.adversary_arch.clone(),
                mean.attack.clone(),
                fmt_float(mean.accuracy),
            ]);
        }
    }
    let csv_path = out_dir.join("arch_grid.csv");
    write_csv(&csv_path, &["victim_arch", "adversary_arch", "attack", "mean_accuracy"], &rows)?;
    written.push(csv_path);
    Ok(written)
}

/// Parameters of an adaptive campaign, echoed into its report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdaptiveRunMeta {
    pub alphas: Vec<f64>,
    pub m: u64,
    pub beta: f64,
    pub fpr: f64,
    pub mode: OracleMode,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdaptiveReport {
    pub tool_version: String,
    pub params: AdaptiveRunMeta,
    pub mse: f64,
    /// None when a noise-free run drove the error to zero; see
    /// `nleaked_unbounded`.
    pub nleaked_regression: Option<f64>,
    pub nleaked_unbounded: bool,
    pub binary_accuracy: f64,
}

/// Writes adaptive_report.json and campaign.csv into `out_dir`.
pub fn emit_adaptive(
    result: &CampaignResult,
    params: &AdaptiveRunMeta,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, RunnerError> {
    ensure_dir(out_dir)?;
    let mut written = Vec::new();

    let unbounded = result.nleaked_regression.is_infinite();
    let report = AdaptiveReport {
        tool_version: tool_version(),
        params: params.clone(),
        mse: result.mse,
        nleaked_regression: if unbounded { None } else { Some(result.nleaked_regression) },
        nleaked_unbounded: unbounded,
        binary_accuracy: result.binary_accuracy,
    };
    let report_path = out_dir.join("adaptive_report.json");
    write_json(&report, &report_path)?;
    written.push(report_path);

    let rows: Vec<Vec<String>> = result
        .rows
        .iter()
        .map(|r| {
            vec![
                fmt_float(r.alpha),
                r.m.to_string(),
                fmt_float(r.beta),
                fmt_float(r.fpr),
                r.mode.to_string(),
                r.trial.to_string(),
                fmt_float(r.alpha_hat),
                r.decision.as_bit().to_string(),
            ]
        })
        .collect();
    let csv_path = out_dir.join("campaign.csv");
    write_csv(
        &csv_path,
        &["alpha", "m", "beta", "fpr", "mode", "trial", "alpha_hat", "decision"],
        &rows,
    )?;
    written.push(csv_path);
    Ok(written)
}
