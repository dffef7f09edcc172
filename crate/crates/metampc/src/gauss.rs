//! Dense Gaussian algebra shared by all modules: PSD factorization, KL
//! divergence, Gaussian expectations and seeded sampling.
//!
//! All functions are pure; samplers take an explicit caller-owned generator.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const LOG_2PI: f64 = 1.8378770664093453;

/// Multivariate normal distribution with dense covariance.
#[derive(Debug, Clone)]
pub struct MvNormal {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl MvNormal {
    /// Build a distribution, checking covariance symmetry (1e-10 relative)
    /// and symmetrizing the stored matrix.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::dim(mean.len(), cov.nrows(), "MvNormal covariance"));
        }
        let scale = cov.norm().max(1.0);
        let asym = (&cov - cov.transpose()).norm();
        if asym > 1e-10 * scale {
            return Err(Error::Config(format!(
                "covariance asymmetry {:.3e} exceeds 1e-10 relative",
                asym / scale
            )));
        }
        let cov = symmetrize(&cov);
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Log-density at `x`; used by Monte-Carlo oracles.
    pub fn logpdf(&self, x: &DVector<f64>) -> Result<f64> {
        let n = self.dim() as f64;
        let chol = cholesky_psd(&self.cov, 0.0)?;
        let d = x - &self.mean;
        // Solve L w = d, then |w|^2 = d^T Sigma^-1 d.
        let w = chol
            .l
            .solve_lower_triangular(&d)
            .ok_or(Error::NotPsd { max_jitter: 0.0 })?;
        Ok(-0.5 * (n * LOG_2PI + chol.logdet() + w.norm_squared()))
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Lower-triangular Cholesky factor of `M + jitter I`.
#[derive(Debug, Clone)]
pub struct CholFactor {
    pub l: DMatrix<f64>,
    /// Jitter actually applied to the diagonal.
    pub jitter: f64,
}

impl CholFactor {
    pub fn logdet(&self) -> f64 {
        2.0 * (0..self.l.nrows()).map(|i| self.l[(i, i)].ln()).sum::<f64>()
    }

    /// Solve (L L^T) x = b.
    pub fn solve(&self, b: &DVector<f64>) -> Option<DVector<f64>> {
        let y = self.l.solve_lower_triangular(b)?;
        self.l.transpose().solve_upper_triangular(&y)
    }

    /// Solve (L L^T) X = B column-wise.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        let y = self.l.solve_lower_triangular(b)?;
        self.l.transpose().solve_upper_triangular(&y)
    }
}

/// Cholesky factorization of a symmetric PSD matrix, retrying with jitter
/// escalated tenfold up to `1e-4 * mean(diag)` before failing.
pub fn cholesky_psd(m: &DMatrix<f64>, jitter: f64) -> Result<CholFactor> {
    assert!(jitter >= 0.0, "jitter must be nonnegative");
    let n = m.nrows();
    if n == 0 {
        return Ok(CholFactor {
            l: DMatrix::zeros(0, 0),
            jitter,
        });
    }
    // The all-zero matrix is PSD with factor zero; nalgebra rejects it and
    // jitter cannot be scaled off a zero diagonal.
    if m.iter().all(|v| *v == 0.0) {
        return Ok(CholFactor {
            l: DMatrix::zeros(n, n),
            jitter,
        });
    }
    let mean_diag = m.diagonal().iter().map(|d| d.abs()).sum::<f64>() / n as f64;
    let max_jitter = 1e-4 * mean_diag.max(f64::MIN_POSITIVE);
    let mut j = jitter;
    loop {
        let mut shifted = m.clone();
        for i in 0..n {
            shifted[(i, i)] += j;
        }
        if let Some(chol) = nalgebra::Cholesky::new(shifted) {
            return Ok(CholFactor { l: chol.l(), jitter: j });
        }
        if j >= max_jitter {
            return Err(Error::NotPsd { max_jitter: j });
        }
        let next = if j == 0.0 { 1e-12 * mean_diag } else { j * 10.0 };
        let next = next.min(max_jitter);
        if next <= j {
            return Err(Error::NotPsd { max_jitter: j });
        }
        j = next;
    }
}

/// Analytic KL(q || p) between Gaussians of equal dimension.
///
/// A symmetric jitter `1e-8 * tr/n` is added to both covariances before
/// evaluation so that rank-deficient variational covariances stay finite.
pub fn kl_gaussian(q: &MvNormal, p: &MvNormal) -> Result<f64> {
    let n = q.dim();
    if p.dim() != n {
        return Err(Error::dim(n, p.dim(), "kl_gaussian dimensions"));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let eps_q = 1e-8 * q.cov.trace() / n as f64;
    let eps_p = 1e-8 * p.cov.trace() / n as f64;
    let eps = eps_q.max(eps_p).max(0.0);

    let mut cov_q = q.cov.clone();
    let mut cov_p = p.cov.clone();
    for i in 0..n {
        cov_q[(i, i)] += eps;
        cov_p[(i, i)] += eps;
    }
    let chol_p = cholesky_psd(&cov_p, 0.0)?;
    let chol_q = cholesky_psd(&cov_q, 0.0)?;

    // tr(Sigma_p^-1 Sigma_q) = |L_p^-1 L_q|_F^2
    let a = chol_p
        .l
        .solve_lower_triangular(&chol_q.l)
        .ok_or(Error::NotPsd { max_jitter: 0.0 })?;
    let trace_term = a.norm_squared();

    let d = &p.mean - &q.mean;
    let w = chol_p
        .l
        .solve_lower_triangular(&d)
        .ok_or(Error::NotPsd { max_jitter: 0.0 })?;
    let maha = w.norm_squared();

    Ok(0.5 * (trace_term + maha - n as f64 + chol_p.logdet() - chol_q.logdet()))
}

/// Closed-form E_{f ~ N(mu_q, var_q)} [ log N(y | f, noise_var) ].
pub fn expected_gaussian_loglik(y: f64, mu_q: f64, var_q: f64, noise_var: f64) -> f64 {
    assert!(var_q >= 0.0 && noise_var > 0.0);
    let r = y - mu_q;
    -0.5 * (LOG_2PI + noise_var.ln()) - (r * r + var_q) / (2.0 * noise_var)
}

/// Sampling estimate of [`expected_gaussian_loglik`]; returns (mean, std error).
/// Kept as a cross-check oracle; the closed form is the default path.
pub fn expected_gaussian_loglik_mc<R: Rng>(
    y: f64,
    mu_q: f64,
    var_q: f64,
    noise_var: f64,
    samples: usize,
    rng: &mut R,
) -> (f64, f64) {
    assert!(samples >= 2);
    let sd = var_q.sqrt();
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for _ in 0..samples {
        let z: f64 = StandardNormal.sample(rng);
        let f = mu_q + sd * z;
        let r = y - f;
        let ll = -0.5 * (LOG_2PI + noise_var.ln()) - r * r / (2.0 * noise_var);
        sum += ll;
        sumsq += ll * ll;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sumsq / n - mean * mean).max(0.0);
    (mean, (var / n).sqrt())
}

/// Draw `count` samples as columns of an n-by-count matrix.
/// Identical generator state yields bitwise identical output.
pub fn sample_mvn<R: Rng>(dist: &MvNormal, count: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    assert!(count >= 1);
    let n = dist.dim();
    let chol = cholesky_psd(&dist.cov, 0.0)?;
    let mut out = DMatrix::zeros(n, count);
    let mut z = DVector::zeros(n);
    for c in 0..count {
        for i in 0..n {
            z[i] = StandardNormal.sample(rng);
        }
        let s = &dist.mean + &chol.l * &z;
        out.set_column(c, &s);
    }
    Ok(out)
}
