//! Experiment harness: configuration, seeded stream derivation, experiment
//! drivers and cross-seed statistics.

pub mod config;
pub mod experiments;
pub mod report;

pub use config::{child_rng, child_seed, Config};
pub use experiments::{
    adapter_from_config, basis_from_config, check_experiment, collect_car, collect_mountain_car,
    elbo_scan_values,
    grip_change_run, ground_truth_mc_model, ground_truth_tire_model, local_minima,
    meta_test_mountain_car, prior_tire_model, race_reference, race_report, race_seed,
    run_experiment,
    set_basis_param, write_scan_csv, GripChangeReport, MetaTestTaskReport, RaceReport,
    RaceSeedResult, CAR_NUM_TASKS, CAR_TASK_POINTS, MC_TEST_THETAS,
};
pub use report::{rmse_vs_ground_truth, Manifest, RmseReport};
