//! Cross-seed RMSE statistics and experiment manifests.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mpc::TrajectoryLog;

/// Quantile by linear interpolation over the inclusive range (the same
/// convention as numpy's default), on a pre-sorted slice.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RmseReport {
    pub per_seed: Vec<f64>,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
}

impl RmseReport {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("RMSE report needs at least one value".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("RMSE values must be finite and nonnegative".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(Self {
            per_seed: values.to_vec(),
            median: quantile_sorted(&sorted, 0.5),
            q1: quantile_sorted(&sorted, 0.25),
            q3: quantile_sorted(&sorted, 0.75),
            whisker_low: sorted[0],
            whisker_high: *sorted.last().unwrap(),
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Cumulative position RMSE between a run and a reference trajectory over
/// the given state components (x for the mountain car, x/y for the car).
/// Logs are truncated to the shorter one.
pub fn rmse_vs_ground_truth(
    run: &TrajectoryLog,
    reference: &TrajectoryLog,
    pos_dims: &[usize],
) -> Result<f64> {
    let n = run.steps.len().min(reference.steps.len());
    if n == 0 {
        return Err(Error::EmptyLog);
    }
    let mut acc = 0.0;
    for i in 0..n {
        let a = &run.steps[i].state;
        let b = &reference.steps[i].state;
        for &d in pos_dims {
            let e = a[d] - b[d];
            acc += e * e;
        }
    }
    Ok((acc / n as f64).sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub crate_version: String,
    pub wall_clock_s: f64,
}

impl Manifest {
    pub fn new(experiment: &str, config_hash: String, seed: u64, wall_clock_s: f64) -> Self {
        Self {
            experiment: experiment.to_string(),
            config_hash,
            seed,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock_s,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
