//! Bayesian linear regression over basis weights: batch posterior, exact
//! rank-one recursive update, the cheap SGD mean update, and prediction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{feature_matrix, BasisSet, WeightPrior};
use crate::gauss::{cholesky_psd, symmetrize};

/// Gaussian posterior over the E basis weights.
#[derive(Debug, Clone)]
pub struct LinearPosterior {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl LinearPosterior {
    pub fn from_prior(prior: &WeightPrior) -> Self {
        Self {
            mu: prior.mean.clone(),
            sigma: prior.cov.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Batch conjugate update:
/// `Sigma = (Phi^T Phi / s2 + Sigma_0^-1)^-1`, `mu = Sigma (Phi^T y / s2 + Sigma_0^-1 m_0)`,
/// via Cholesky solves.
pub fn blr_fit(
    phi: &DMatrix<f64>,
    y: &DVector<f64>,
    noise_var: f64,
    prior: &WeightPrior,
) -> Result<LinearPosterior> {
    assert!(noise_var > 0.0);
    let e = prior.mean.len();
    if phi.ncols() != e && phi.nrows() > 0 {
        return Err(Error::dim(e, phi.ncols(), "blr_fit feature columns"));
    }
    if phi.nrows() != y.len() {
        return Err(Error::dim(phi.nrows(), y.len(), "blr_fit targets"));
    }
    if phi.nrows() == 0 {
        return Ok(LinearPosterior::from_prior(prior));
    }

    let prior_chol = cholesky_psd(&prior.cov, 0.0)?;
    let prior_info = prior_chol
        .solve_mat(&DMatrix::identity(e, e))
        .ok_or(Error::NotPsd { max_jitter: 0.0 })?;

    let info = symmetrize(&(phi.transpose() * phi / noise_var + &prior_info));
    let info_chol = cholesky_psd(&info, 0.0)?;
    let sigma = info_chol
        .solve_mat(&DMatrix::identity(e, e))
        .ok_or(Error::NotPsd { max_jitter: 0.0 })?;

    let rhs = phi.transpose() * y / noise_var + &prior_info * &prior.mean;
    let mu = info_chol.solve(&rhs).ok_or(Error::NotPsd { max_jitter: 0.0 })?;
    Ok(LinearPosterior {
        mu,
        sigma: symmetrize(&sigma),
    })
}

/// Exact rank-one conjugate (Kalman-style) update with one observation.
pub fn blr_update_recursive(
    post: &LinearPosterior,
    phi: &DVector<f64>,
    y: f64,
    noise_var: f64,
) -> LinearPosterior {
    assert!(noise_var > 0.0);
    assert_eq!(phi.len(), post.dim());
    let sigma_phi = &post.sigma * phi;
    let s = phi.dot(&sigma_phi) + noise_var;
    let gain = &sigma_phi / s;
    let innovation = y - phi.dot(&post.mu);
    let mu = &post.mu + &gain * innovation;
    let sigma = &post.sigma - &gain * sigma_phi.transpose();
    LinearPosterior {
        mu,
        sigma: symmetrize(&sigma),
    }
}

/// Sign convention for the sequential mean update regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SgdMode {
    /// MAP gradient: the regularizer shrinks the mean.
    Shrink,
    /// The update exactly as printed, with `+ noise_var * mu`.
    LiteralPaper,
}

pub const SGD_DEFAULT_ETA: f64 = 0.0005;
pub const SGD_DEFAULT_NOISE_STD: f64 = 0.02;

/// Cheap sequential mean-only update
/// `mu' = mu + eta ((y - mu^T phi) phi -/+ noise_var mu)`.
pub fn sgd_mean_update(
    mu: &DVector<f64>,
    phi: &DVector<f64>,
    y: f64,
    eta: f64,
    noise_var: f64,
    mode: SgdMode,
) -> DVector<f64> {
    assert!(eta > 0.0);
    assert!(noise_var >= 0.0);
    let residual = y - mu.dot(phi);
    let reg = match mode {
        SgdMode::Shrink => -noise_var,
        SgdMode::LiteralPaper => noise_var,
    };
    mu + (phi * residual + mu * reg) * eta
}

/// Predictive mean and (diagonal) variance at the rows of `x`.
pub fn predict(
    post: &LinearPosterior,
    basis: &BasisSet,
    x: &DMatrix<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let phi = feature_matrix(basis, x)?;
    if phi.ncols() != post.dim() {
        return Err(Error::dim(post.dim(), phi.ncols(), "predict features"));
    }
    let mean = &phi * &post.mu;
    let n = phi.nrows();
    let mut var = DVector::zeros(n);
    for i in 0..n {
        let f = phi.row(i).transpose();
        var[i] = (f.dot(&(&post.sigma * &f))).max(0.0);
    }
    Ok((mean, var))
}

/// Predictive mean and full covariance `Phi Sigma_alpha Phi^T`.
pub fn predict_full(
    post: &LinearPosterior,
    basis: &BasisSet,
    x: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let phi = feature_matrix(basis, x)?;
    if phi.ncols() != post.dim() {
        return Err(Error::dim(post.dim(), phi.ncols(), "predict features"));
    }
    let mean = &phi * &post.mu;
    let cov = symmetrize(&(&phi * &post.sigma * phi.transpose()));
    Ok((mean, cov))
}

/// JSON wire format for checkpointing [`LinearPosterior`].
#[derive(Debug, Serialize, Deserialize)]
pub struct LinearPosteriorJson {
    pub mu: Vec<f64>,
    pub sigma_rowmajor: Vec<f64>,
}

impl From<&LinearPosterior> for LinearPosteriorJson {
    fn from(p: &LinearPosterior) -> Self {
        let e = p.dim();
        let mut sigma_rowmajor = Vec::with_capacity(e * e);
        for i in 0..e {
            for j in 0..e {
                sigma_rowmajor.push(p.sigma[(i, j)]);
            }
        }
        Self {
            mu: p.mu.iter().copied().collect(),
            sigma_rowmajor,
        }
    }
}

impl TryFrom<LinearPosteriorJson> for LinearPosterior {
    type Error = Error;

    fn try_from(j: LinearPosteriorJson) -> Result<Self> {
        let e = j.mu.len();
        if j.sigma_rowmajor.len() != e * e {
            return Err(Error::dim(e * e, j.sigma_rowmajor.len(), "posterior sigma"));
        }
        Ok(Self {
            mu: DVector::from_vec(j.mu),
            sigma: DMatrix::from_row_slice(e, e, &j.sigma_rowmajor),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{BasisSet, KernelHyper};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_prior(e: usize) -> WeightPrior {
        WeightPrior {
            mean: DVector::zeros(e),
            cov: DMatrix::identity(e, e),
        }
    }

    #[test]
    fn fit_no_data_returns_prior() {
        let prior = unit_prior(3);
        let post = blr_fit(&DMatrix::zeros(0, 3), &DVector::zeros(0), 1.0, &prior).unwrap();
        assert_eq!(post.mu, prior.mean);
        assert_eq!(post.sigma, prior.cov);
    }

    #[test]
    fn fit_scalar_conjugate() {
        // Phi=[1], y=[2], s2=1, prior N(0,1) -> N(1, 0.5)
        let prior = unit_prior(1);
        let post = blr_fit(
            &DMatrix::from_row_slice(1, 1, &[1.0]),
            &DVector::from_vec(vec![2.0]),
            1.0,
            &prior,
        )
        .unwrap();
        assert_relative_eq!(post.mu[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(post.sigma[(0, 0)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn fit_matches_regularized_least_squares() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let phi = DMatrix::from_fn(50, 5, |_, _| r.gen_range(-1.0..1.0));
        let y = DVector::from_fn(50, |_, _| r.gen_range(-1.0..1.0));
        let s2 = 0.3;
        let prior = unit_prior(5);
        let post = blr_fit(&phi, &y, s2, &prior).unwrap();

        // Oracle: direct dense solve of (Phi^T Phi + s2 I) mu = Phi^T y.
        let lhs = phi.transpose() * &phi + DMatrix::identity(5, 5) * s2;
        let rhs = phi.transpose() * &y;
        let mu_direct = lhs.lu().solve(&rhs).unwrap();
        assert!((&post.mu - &mu_direct).norm() / mu_direct.norm() <= 1e-8);
    }

    #[test]
    fn recursive_zero_innovation_zero_uncertainty() {
        let post = LinearPosterior {
            mu: DVector::from_vec(vec![0.5, -0.25]),
            sigma: DMatrix::zeros(2, 2),
        };
        let phi = DVector::from_vec(vec![2.0, 4.0]);
        let y = phi.dot(&post.mu);
        let next = blr_update_recursive(&post, &phi, y, 0.1);
        assert_eq!(next.mu, post.mu);
        assert_eq!(next.sigma, post.sigma);
    }

    #[test]
    fn recursive_uninformative_observation() {
        let post = LinearPosterior {
            mu: DVector::from_vec(vec![1.0, -2.0]),
            sigma: DMatrix::identity(2, 2),
        };
        let phi = DVector::from_vec(vec![0.3, 0.7]);
        let next = blr_update_recursive(&post, &phi, 5.0, 1e9);
        assert!((&next.mu - &post.mu).norm() / post.mu.norm() <= 1e-6);
        assert!((&next.sigma - &post.sigma).norm() / post.sigma.norm() <= 1e-6);
    }

    #[test]
    fn recursive_equals_batch() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let n = r.gen_range(1..40);
            let e = r.gen_range(1..8);
            let phi = DMatrix::from_fn(n, e, |_, _| r.gen_range(-1.0..1.0));
            let y = DVector::from_fn(n, |_, _| r.gen_range(-1.0..1.0));
            let s2 = r.gen_range(0.05..1.0);
            let prior = unit_prior(e);
            let batch = blr_fit(&phi, &y, s2, &prior).unwrap();
            let mut rec = LinearPosterior::from_prior(&prior);
            for i in 0..n {
                rec = blr_update_recursive(&rec, &phi.row(i).transpose(), y[i], s2);
            }
            assert!((&rec.mu - &batch.mu).norm() / batch.mu.norm().max(1e-12) <= 1e-8);
            assert!((&rec.sigma - &batch.sigma).norm() / batch.sigma.norm() <= 1e-8);
        }
    }

    #[test]
    fn covariance_monotone_under_update() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let mut post = LinearPosterior {
            mu: DVector::zeros(4),
            sigma: DMatrix::identity(4, 4),
        };
        for _ in 0..20 {
            let phi = DVector::from_fn(4, |_, _| r.gen_range(-1.0..1.0));
            let next = blr_update_recursive(&post, &phi, r.gen_range(-1.0..1.0), 0.2);
            let diff = &post.sigma - &next.sigma;
            let eig = nalgebra::SymmetricEigen::new(crate::gauss::symmetrize(&diff));
            assert!(eig.eigenvalues.iter().all(|&e| e >= -1e-9));
            post = next;
        }
    }

    #[test]
    fn sgd_direct_evaluation() {
        let mu = DVector::zeros(1);
        let phi = DVector::from_vec(vec![1.0]);
        let out = sgd_mean_update(&mu, &phi, 1.0, 0.0005, 0.0, SgdMode::Shrink);
        assert_relative_eq!(out[0], 0.0005, epsilon = 1e-15);
    }

    #[test]
    fn sgd_zero_residual_unchanged() {
        let mu = DVector::from_vec(vec![0.4, -0.1]);
        let phi = DVector::from_vec(vec![1.0, 2.0]);
        let y = mu.dot(&phi);
        let out = sgd_mean_update(&mu, &phi, y, 0.01, 0.0, SgdMode::Shrink);
        assert_eq!(out, mu);
    }

    #[test]
    fn sgd_mode_sign_difference() {
        let mu = DVector::from_vec(vec![0.5, -1.5]);
        let phi = DVector::from_vec(vec![1.0, 1.0]);
        let y = mu.dot(&phi);
        let eta = 0.01;
        let nv = 0.04;
        let a = sgd_mean_update(&mu, &phi, y, eta, nv, SgdMode::Shrink);
        let b = sgd_mean_update(&mu, &phi, y, eta, nv, SgdMode::LiteralPaper);
        let diff = &b - &a;
        let expect = &mu * (2.0 * eta * nv);
        assert_relative_eq!(diff, expect, epsilon = 1e-14);
    }

    #[test]
    fn predict_zero_covariance() {
        let basis = BasisSet::parametric_cosine(0.2, 3.0, KernelHyper::new(&[1.0], 1.0, 0.01));
        let post = LinearPosterior {
            mu: DVector::from_vec(vec![0.5]),
            sigma: DMatrix::zeros(1, 1),
        };
        let x = DMatrix::from_column_slice(5, 1, &[-1.0, -0.5, 0.0, 0.5, 1.0]);
        let (_, var) = predict(&post, &basis, &x).unwrap();
        assert!(var.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn predict_nystrom_prior_variance_at_inducing() {
        let z = DMatrix::from_row_slice(4, 1, &[-1.5, -0.5, 0.5, 1.5]);
        let h = KernelHyper::new(&[0.8], 1.7, 0.01);
        let basis = BasisSet::subset_of_regressors(z.clone(), h);
        let prior = crate::features::nystrom_prior(&basis).unwrap();
        let post = LinearPosterior::from_prior(&prior);
        let (_, var) = predict(&post, &basis, &z).unwrap();
        for i in 0..4 {
            assert_relative_eq!(var[i], 1.7, max_relative = 1e-5);
        }
    }

    #[test]
    fn predict_matches_dense_products() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let z = DMatrix::from_fn(3, 1, |_, _| r.gen_range(-1.0..1.0));
        let basis = BasisSet::subset_of_regressors(z, KernelHyper::new(&[1.0], 1.0, 0.01));
        let post = LinearPosterior {
            mu: DVector::from_fn(3, |_, _| r.gen_range(-1.0..1.0)),
            sigma: {
                let b = DMatrix::from_fn(3, 3, |_, _| r.gen_range(-1.0..1.0));
                &b * b.transpose()
            },
        };
        let x = DMatrix::from_fn(7, 1, |_, _| r.gen_range(-2.0..2.0));
        let (mean, var) = predict(&post, &basis, &x).unwrap();
        let (mean_f, cov_f) = predict_full(&post, &basis, &x).unwrap();
        let phi = feature_matrix(&basis, &x).unwrap();
        let mean_direct = &phi * &post.mu;
        let cov_direct = &phi * &post.sigma * phi.transpose();
        assert_relative_eq!(mean, mean_direct, epsilon = 1e-12);
        assert_relative_eq!(mean_f, mean_direct, epsilon = 1e-12);
        for i in 0..7 {
            assert_relative_eq!(var[i], cov_direct[(i, i)], max_relative = 1e-10);
            assert_relative_eq!(cov_f[(i, i)], cov_direct[(i, i)], max_relative = 1e-10);
        }
    }

    #[test]
    fn posterior_json_roundtrip() {
        let p = LinearPosterior {
            mu: DVector::from_vec(vec![1.0, 2.0]),
            sigma: DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 2.0]),
        };
        let j = serde_json::to_string(&LinearPosteriorJson::from(&p)).unwrap();
        let back: LinearPosterior =
            LinearPosterior::try_from(serde_json::from_str::<LinearPosteriorJson>(&j).unwrap())
                .unwrap();
        assert_eq!(back.mu, p.mu);
        assert_eq!(back.sigma, p.sigma);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(30))]

        // Row permutations leave the batch posterior unchanged.
        #[test]
        fn fit_permutation_invariant(seed in 0u64..1000) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let n = 12;
            let e = 3;
            let phi = DMatrix::from_fn(n, e, |_, _| r.gen_range(-1.0..1.0));
            let y = DVector::from_fn(n, |_, _| r.gen_range(-1.0..1.0));
            let prior = unit_prior(e);
            let a = blr_fit(&phi, &y, 0.2, &prior).unwrap();

            let mut order: Vec<usize> = (0..n).collect();
            // Deterministic shuffle.
            for i in (1..n).rev() {
                let j = r.gen_range(0..=i);
                order.swap(i, j);
            }
            let phi2 = DMatrix::from_fn(n, e, |i, j| phi[(order[i], j)]);
            let y2 = DVector::from_fn(n, |i, _| y[order[i]]);
            let b = blr_fit(&phi2, &y2, 0.2, &prior).unwrap();
            prop_assert!((&a.mu - &b.mu).norm() <= 1e-9);
            prop_assert!((&a.sigma - &b.sigma).norm() <= 1e-9);
        }

        // Predictive variance is nonnegative for arbitrary PSD posteriors.
        #[test]
        fn predict_variance_nonnegative(seed in 0u64..1000) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let z = DMatrix::from_fn(4, 1, |_, _| r.gen_range(-2.0..2.0));
            let basis = BasisSet::subset_of_regressors(z, KernelHyper::new(&[1.0], 1.0, 0.01));
            let b = DMatrix::from_fn(4, 4, |_, _| r.gen_range(-1.0..1.0));
            let post = LinearPosterior {
                mu: DVector::from_fn(4, |_, _| r.gen_range(-1.0..1.0)),
                sigma: &b * b.transpose(),
            };
            let x = DMatrix::from_fn(10, 1, |_, _| r.gen_range(-3.0..3.0));
            let (_, var) = predict(&post, &basis, &x).unwrap();
            prop_assert!(var.iter().all(|&v| v >= 0.0));
        }
    }
}
