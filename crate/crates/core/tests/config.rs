//! Config parsing and validation: unknown keys must be rejected wherever
//! they appear, and every cross-field rule in `validate` must fire.

use distinf::runner::{load_config, ArchGridConfig, ExperimentConfig, RunnerError};
use serde_json::{json, Value};

/// Smallest config that parses and validates cleanly.
fn base() -> Value {
    json!({
        "schema_version": 1,
        "master_seed": 7,
        "data": {"synthetic": {"pool_size": 1000, "feature_dim": 3, "phi": 0.3}},
        "alpha0": 0.5,
        "alpha1_grid": [0.2],
        "victims_per_side": 4,
        "shadows_per_side": 3,
        "trials": 1,
        "train_size": 100,
        "victim_model": {"arch": "linear", "epochs": 5, "learning_rate": 0.1},
        "attacks": [{"kl": {}}]
    })
}

fn parse(v: Value) -> Result<ExperimentConfig, serde_json::Error> {
    serde_json::from_value(v)
}

fn expect_config_err(v: Value, needle: &str) {
    let cfg = parse(v).expect("should parse; the failure belongs to validate");
    match cfg.validate() {
        Err(RunnerError::Config(msg)) => {
            assert!(msg.contains(needle), "message {msg:?} missing {needle:?}")
        }
        other => panic!("expected Config error containing {needle:?}, got {other:?}"),
    }
}

#[test]
fn minimal_config_fills_defaults() {
    let cfg = parse(base()).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.query_size, 200);
    assert_eq!(cfg.eval_size, 400);
    assert_eq!(cfg.victim_fraction, 0.5);
    assert!(cfg.adversary_model.is_none());
    assert!(cfg.defense.is_none());
    assert!(!cfg.same_setup_adversary);
    assert!(cfg.epoch_checkpoints.is_none());
    // Omitted checkpoints resolve to the final epoch.
    assert_eq!(cfg.checkpoints(), vec![5]);
    assert_eq!(cfg.victim_model.batch_size, 32);
    assert_eq!(cfg.adversary_model().epochs, 5);
}

#[test]
fn config_round_trips_through_json() {
    let cfg = parse(base()).unwrap();
    let text = serde_json::to_string(&cfg).unwrap();
    let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(cfg, back);
}

#[test]
fn unknown_top_level_key_rejected() {
    let mut v = base();
    v["bogus"] = json!(1);
    let err = parse(v).unwrap_err().to_string();
    assert!(err.contains("bogus"), "{err}");
}

#[test]
fn unknown_key_inside_data_variant_rejected() {
    let mut v = base();
    v["data"]["synthetic"]["noise"] = json!(0.1);
    let err = parse(v).unwrap_err().to_string();
    assert!(err.contains("noise"), "{err}");
}

#[test]
fn unknown_key_inside_attack_variant_rejected() {
    let mut v = base();
    v["attacks"] = json!([{"kl": {"pair_fraction": 0.5, "votes": 3}}]);
    let err = parse(v).unwrap_err().to_string();
    assert!(err.contains("votes"), "{err}");
}

#[test]
fn unknown_key_inside_model_rejected() {
    let mut v = base();
    v["victim_model"]["momentum"] = json!(0.9);
    let err = parse(v).unwrap_err().to_string();
    assert!(err.contains("momentum"), "{err}");
}

#[test]
fn misspelled_enum_variant_rejected() {
    let mut v = base();
    v["defense"] = json!("subsample");
    assert!(parse(v).is_err());
}

#[test]
fn wrong_schema_version_rejected() {
    let mut v = base();
    v["schema_version"] = json!(2);
    expect_config_err(v, "schema_version");
}

#[test]
fn alpha0_in_grid_rejected() {
    let mut v = base();
    v["alpha1_grid"] = json!([0.2, 0.5]);
    expect_config_err(v, "alpha0");
}

#[test]
fn duplicate_grid_entry_rejected() {
    let mut v = base();
    v["alpha1_grid"] = json!([0.2, 0.2]);
    expect_config_err(v, "twice");
}

#[test]
fn degenerate_zero_one_pair_rejected() {
    let mut v = base();
    v["alpha0"] = json!(0.0);
    v["alpha1_grid"] = json!([1.0]);
    expect_config_err(v, "n_leaked");
}

#[test]
fn duplicate_attack_kind_rejected() {
    let mut v = base();
    v["attacks"] = json!([{"kl": {}}, {"kl": {"flip_kl": true}}]);
    expect_config_err(v, "twice");
}

#[test]
fn odd_query_size_rejected() {
    let mut v = base();
    v["query_size"] = json!(201);
    expect_config_err(v, "query_size");
}

#[test]
fn bad_pair_fraction_rejected() {
    let mut v = base();
    v["attacks"] = json!([{"kl": {"pair_fraction": 0.0}}]);
    expect_config_err(v, "pair_fraction");
}

#[test]
fn bad_label_epsilon_rejected() {
    let mut v = base();
    v["access"] = json!({"label_only_direct": {"epsilon": 0.5}});
    expect_config_err(v, "epsilon");
}

#[test]
fn same_setup_without_defense_rejected() {
    let mut v = base();
    v["same_setup_adversary"] = json!(true);
    expect_config_err(v, "defense");
}

#[test]
fn checkpoints_must_increase_and_fit_epochs() {
    let mut v = base();
    v["epoch_checkpoints"] = json!([3, 3]);
    expect_config_err(v, "increasing");

    let mut v = base();
    v["epoch_checkpoints"] = json!([1, 9]);
    expect_config_err(v, "exceeds");

    let mut v = base();
    v["epoch_checkpoints"] = json!([0, 2]);
    expect_config_err(v, "start at 1");
}

#[test]
fn poison_rate_bounds_checked() {
    let mut v = base();
    v["defense"] = json!({"poison": {"rate": 1.0}});
    expect_config_err(v, "rate");
}

#[test]
fn phi_must_stay_inside_open_interval() {
    let mut v = base();
    v["data"]["synthetic"]["phi"] = json!(1.0);
    expect_config_err(v, "phi");
}

#[test]
fn csv_columns_must_differ() {
    let mut v = base();
    v["data"] = json!({"csv": {"path": "rows.csv", "task_column": "y", "property_column": "y"}});
    expect_config_err(v, "differ");
}

#[test]
fn missing_file_is_a_config_error() {
    let err = load_config(std::path::Path::new("/definitely/not/here.json")).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("cannot read"));
}

#[test]
fn malformed_json_maps_to_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.json");
    std::fs::write(&path, "{\"schema_version\": 1,").unwrap();
    let err = load_config(&path).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn arch_grid_needs_model_lists() {
    let grid = json!({
        "experiment": base(),
        "victim_models": [],
        "adversary_models": [{"arch": "linear", "epochs": 5, "learning_rate": 0.1}]
    });
    let grid: ArchGridConfig = serde_json::from_value(grid).unwrap();
    assert!(matches!(grid.validate(), Err(RunnerError::Config(_))));
}
