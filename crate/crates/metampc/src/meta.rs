//! Multi-task dataset handling, the negative-ELBO meta-training loss, and
//! first-order hyperparameter optimization.
//!
//! The loss decomposes per task into an expected log-likelihood term (closed
//! form, no sampling) and a KL regularizer against the zero-mean GP prior
//! evaluated at the task's own training inputs.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blr::{blr_fit, predict_full, LinearPosterior};
use crate::error::{Error, Result};
use crate::features::{default_prior, gram_matrix, BasisKind, BasisSet};
use crate::gauss::{expected_gaussian_loglik, kl_gaussian, MvNormal};

/// Per-task Gram sizes are capped at this many rows; larger tasks are
/// subsampled uniformly with the run seed.
pub const KL_GRAM_CAP: usize = 200;

/// Input/output pairs for one task (one output dimension).
#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub task_id: String,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl TaskDataset {
    pub fn new(task_id: impl Into<String>, x: DMatrix<f64>, y: DVector<f64>) -> Self {
        assert_eq!(x.nrows(), y.len());
        assert!(x.iter().all(|v| v.is_finite()));
        assert!(y.iter().all(|v| v.is_finite()));
        Self {
            task_id: task_id.into(),
            x,
            y,
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Collection of tasks sharing an input dimension.
#[derive(Debug, Clone)]
pub struct MetaDataset {
    pub tasks: Vec<TaskDataset>,
    pub input_dim: usize,
}

impl MetaDataset {
    pub fn new(tasks: Vec<TaskDataset>, input_dim: usize) -> Self {
        for t in &tasks {
            assert!(t.is_empty() || t.x.ncols() == input_dim);
        }
        Self { tasks, input_dim }
    }

    /// Load one CSV per task from a directory. Header `x1,...,xd,y`;
    /// task_id is the file stem. Tasks are sorted by id for determinism.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "csv").unwrap_or(false))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Config(format!("no task CSVs in {}", dir.display())));
        }
        let mut tasks = Vec::new();
        let mut input_dim = 0;
        for p in &paths {
            let mut rdr = csv::Reader::from_path(p)?;
            let headers = rdr.headers()?.clone();
            let d = headers.len() - 1;
            if headers.get(d) != Some("y") {
                return Err(Error::Config(format!("{}: last column must be y", p.display())));
            }
            input_dim = d;
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for rec in rdr.records() {
                let rec = rec?;
                for j in 0..d {
                    xs.push(rec[j].parse::<f64>().map_err(|e| {
                        Error::Config(format!("{}: bad number: {e}", p.display()))
                    })?);
                }
                ys.push(rec[d].parse::<f64>().map_err(|e| {
                    Error::Config(format!("{}: bad number: {e}", p.display()))
                })?);
            }
            let n = ys.len();
            let stem = p.file_stem().unwrap().to_string_lossy().to_string();
            tasks.push(TaskDataset::new(
                stem,
                DMatrix::from_row_slice(n, d, &xs),
                DVector::from_vec(ys),
            ));
        }
        Ok(Self::new(tasks, input_dim))
    }

    /// Write one CSV per task into `dir` using the loadable schema.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for t in &self.tasks {
            let mut w = csv::Writer::from_path(dir.join(format!("{}.csv", t.task_id)))?;
            let mut header: Vec<String> = (1..=self.input_dim).map(|j| format!("x{j}")).collect();
            header.push("y".into());
            w.write_record(&header)?;
            for i in 0..t.len() {
                let mut rec: Vec<String> =
                    (0..self.input_dim).map(|j| format!("{}", t.x[(i, j)])).collect();
                rec.push(format!("{}", t.y[i]));
                w.write_record(&rec)?;
            }
            w.flush()?;
        }
        Ok(())
    }

    /// All inputs pooled across tasks, rows stacked in task order.
    pub fn pooled_inputs(&self) -> DMatrix<f64> {
        let n: usize = self.tasks.iter().map(|t| t.len()).sum();
        let mut out = DMatrix::zeros(n, self.input_dim);
        let mut r = 0;
        for t in &self.tasks {
            for i in 0..t.len() {
                for j in 0..self.input_dim {
                    out[(r, j)] = t.x[(i, j)];
                }
                r += 1;
            }
        }
        out
    }
}

/// Inducing inputs at uniform quantiles of the pooled training inputs
/// (per dimension, matched rows). Standard initialization before
/// meta-training moves them.
pub fn init_inducing_quantiles(data: &MetaDataset, e: usize) -> DMatrix<f64> {
    let pooled = data.pooled_inputs();
    let n = pooled.nrows();
    assert!(n > 0 && e >= 1);
    let d = data.input_dim;
    let mut z = DMatrix::zeros(e, d);
    for j in 0..d {
        let mut col: Vec<f64> = pooled.column(j).iter().copied().collect();
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for i in 0..e {
            let q = (i as f64 + 0.5) / e as f64;
            let idx = ((q * (n - 1) as f64).round() as usize).min(n - 1);
            z[(i, j)] = col[idx];
        }
    }
    z
}

fn subsample_rows(task: &TaskDataset, cap: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>, Vec<usize>) {
    let n = task.len();
    if n <= cap {
        return (task.x.clone(), task.y.clone(), (0..n).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let mut keep: Vec<usize> = idx.into_iter().take(cap).collect();
    keep.sort_unstable();
    let x = DMatrix::from_fn(cap, task.x.ncols(), |i, j| task.x[(keep[i], j)]);
    let y = DVector::from_fn(cap, |i, _| task.y[keep[i]]);
    (x, y, keep)
}

/// Posterior over the weights for one task: batch BLR with the basis's
/// default weight prior and noise variance.
pub fn per_task_posterior(basis: &BasisSet, task: &TaskDataset) -> Result<LinearPosterior> {
    let prior = default_prior(basis)?;
    let phi = crate::features::feature_matrix(basis, &task.x)?;
    blr_fit(&phi, &task.y, basis.noise_var(), &prior)
}

/// Negative ELBO of the meta-training loss, deterministic closed form:
/// `-(sum_m [ sum_i E_q log p(y_i | f) - KL(q^m || p^m) ])`.
pub fn negative_elbo(basis: &BasisSet, data: &MetaDataset) -> Result<f64> {
    negative_elbo_seeded(basis, data, 0)
}

/// As [`negative_elbo`] with an explicit seed for the Gram-cap subsample.
pub fn negative_elbo_seeded(basis: &BasisSet, data: &MetaDataset, seed: u64) -> Result<f64> {
    let noise_var = basis.noise_var();
    let mut loss = 0.0;
    // Fixed reduction order: tasks sorted by id.
    let mut order: Vec<usize> = (0..data.tasks.len()).collect();
    order.sort_by(|&a, &b| data.tasks[a].task_id.cmp(&data.tasks[b].task_id));
    for &ti in &order {
        let task = &data.tasks[ti];
        if task.is_empty() {
            continue;
        }
        let (x, y, _) = subsample_rows(task, KL_GRAM_CAP, seed ^ ti as u64);
        let sub = TaskDataset::new(task.task_id.clone(), x, y);
        let post = per_task_posterior(basis, &sub)?;
        let (mu_q, cov_q) = predict_full(&post, basis, &sub.x)?;

        let mut loglik = 0.0;
        for i in 0..sub.len() {
            loglik += expected_gaussian_loglik(sub.y[i], mu_q[i], cov_q[(i, i)].max(0.0), noise_var);
        }

        let q = MvNormal::new(mu_q, cov_q)?;
        let prior_gram = gram_matrix(&sub.x, &basis.kernel);
        let p = MvNormal::new(DVector::zeros(sub.len()), prior_gram)?;
        let kl = kl_gaussian(&q, &p)?;
        loss += -(loglik - kl);
    }
    Ok(loss)
}

const LOG_BOUND_HI: f64 = 6.907755278982137; // ln(1e3)
const LOG_BOUND_LO: f64 = -23.025850929940457; // ln(1e-10)

/// Hyperparameter vector layout: `[log l_1..log l_d, log sigma_f^2,
/// log sigma_w^2, vec(Z) row-major]` (SoR) or `[..., freq]` (cosine).
pub fn pack_params(basis: &BasisSet) -> DVector<f64> {
    let mut v: Vec<f64> = basis.kernel.log_lengthscale.clone();
    v.push(basis.kernel.log_signal_var);
    v.push(basis.kernel.log_noise_var);
    match basis.kind {
        BasisKind::SubsetOfRegressors => {
            for i in 0..basis.inducing.nrows() {
                for j in 0..basis.inducing.ncols() {
                    v.push(basis.inducing[(i, j)]);
                }
            }
        }
        BasisKind::ParametricCosine => v.push(basis.freq),
    }
    DVector::from_vec(v)
}

/// Inverse of [`pack_params`]; log-space kernel entries are clamped to the
/// box `[ln 1e-10, ln 1e3]`.
pub fn unpack_params(template: &BasisSet, params: &DVector<f64>) -> BasisSet {
    let d = template.kernel.input_dim();
    let mut b = template.clone();
    for j in 0..d {
        b.kernel.log_lengthscale[j] = params[j].clamp(LOG_BOUND_LO, LOG_BOUND_HI);
    }
    b.kernel.log_signal_var = params[d].clamp(LOG_BOUND_LO, LOG_BOUND_HI);
    b.kernel.log_noise_var = params[d + 1].clamp(LOG_BOUND_LO, LOG_BOUND_HI);
    match b.kind {
        BasisKind::SubsetOfRegressors => {
            let e = b.inducing.nrows();
            let dz = b.inducing.ncols();
            for i in 0..e {
                for j in 0..dz {
                    b.inducing[(i, j)] = params[d + 2 + i * dz + j];
                }
            }
        }
        BasisKind::ParametricCosine => b.freq = params[d + 2],
    }
    b
}

/// Central finite-difference gradient of the negative ELBO over the packed
/// hyperparameters, relative step `grad_step * max(|theta_j|, 1)`.
pub fn elbo_gradient(
    basis: &BasisSet,
    data: &MetaDataset,
    grad_step: f64,
    seed: u64,
) -> Result<DVector<f64>> {
    let theta = pack_params(basis);
    let mut grad = DVector::zeros(theta.len());
    for j in 0..theta.len() {
        let h = grad_step * theta[j].abs().max(1.0);
        let mut tp = theta.clone();
        tp[j] += h;
        let mut tm = theta.clone();
        tm[j] -= h;
        let fp = negative_elbo_seeded(&unpack_params(basis, &tp), data, seed)?;
        let fm = negative_elbo_seeded(&unpack_params(basis, &tm), data, seed)?;
        grad[j] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetaOptimizer {
    GradientDescentWithBacktracking,
    AdaptivePerParameter,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetaTrainConfig {
    pub max_iters: usize,
    /// Relative finite-difference step.
    pub grad_step: f64,
    pub optimizer: MetaOptimizer,
    pub seed: u64,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            max_iters: 150,
            grad_step: 1e-5,
            optimizer: MetaOptimizer::GradientDescentWithBacktracking,
            seed: 0,
        }
    }
}

/// One accepted optimization step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iter: usize,
    pub loss: f64,
    pub step_size: f64,
}

/// First-order descent with backtracking line search over the packed
/// hyperparameters. Returns the best-seen basis and the accepted-step loss
/// trace (non-increasing by construction).
pub fn meta_train(
    data: &MetaDataset,
    cfg: &MetaTrainConfig,
    basis0: &BasisSet,
) -> Result<(BasisSet, Vec<TraceEntry>)> {
    if data.tasks.iter().all(|t| t.is_empty()) {
        return Ok((
            basis0.clone(),
            vec![TraceEntry {
                iter: 0,
                loss: 0.0,
                step_size: 0.0,
            }],
        ));
    }
    let mut theta = pack_params(basis0);
    let mut basis = basis0.clone();
    let mut loss = negative_elbo_seeded(&basis, data, cfg.seed)?;
    let mut trace = vec![TraceEntry {
        iter: 0,
        loss,
        step_size: 0.0,
    }];
    let mut step = 0.1;
    let mut grad_sq_avg: Option<DVector<f64>> = None;

    for iter in 1..=cfg.max_iters {
        let grad = elbo_gradient(&basis, data, cfg.grad_step, cfg.seed)?;
        let gnorm = grad.norm();
        if gnorm < 1e-12 {
            break;
        }
        let dir = match cfg.optimizer {
            MetaOptimizer::GradientDescentWithBacktracking => -&grad / gnorm,
            MetaOptimizer::AdaptivePerParameter => {
                let avg = grad_sq_avg.get_or_insert_with(|| grad.component_mul(&grad));
                *avg = &*avg * 0.9 + grad.component_mul(&grad) * 0.1;
                let mut d = DVector::zeros(grad.len());
                for j in 0..grad.len() {
                    d[j] = -grad[j] / (avg[j].sqrt() + 1e-8);
                }
                let n = d.norm();
                d / n
            }
        };

        // Backtracking: halve until the loss decreases, max 20 halvings.
        let mut accepted = false;
        let mut s = step;
        for _ in 0..20 {
            let cand = &theta + &dir * s;
            let cand_basis = unpack_params(&basis, &cand);
            let cand_loss = negative_elbo_seeded(&cand_basis, data, cfg.seed)?;
            if cand_loss.is_finite() && cand_loss < loss {
                theta = cand;
                basis = cand_basis;
                loss = cand_loss;
                trace.push(TraceEntry {
                    iter,
                    loss,
                    step_size: s,
                });
                step = (s * 2.0).min(1.0);
                accepted = true;
                break;
            }
            s *= 0.5;
        }
        if !accepted {
            if iter == 1 {
                return Err(Error::OptimFailed);
            }
            break;
        }
        // Relative decrease below 1e-6 over the last 10 accepted steps.
        if trace.len() > 10 {
            let prev = trace[trace.len() - 11].loss;
            let denom = prev.abs().max(1.0);
            if (prev - loss) / denom < 1e-6 {
                break;
            }
        }
    }
    Ok((basis, trace))
}

/// Write a loss trace as CSV `iter,loss,step_size`.
pub fn write_trace_csv(path: &Path, trace: &[TraceEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iter", "loss", "step_size"])?;
    for t in trace {
        w.write_record(&[t.iter.to_string(), t.loss.to_string(), t.step_size.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
