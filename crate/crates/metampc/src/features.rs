//! Kernels and finite basis sets realizing the truncated expansion
//! `f(x) ~= sum_i phi_i(x) alpha_i`.
//!
//! Two basis kinds are supported: subset-of-regressors (kernel evaluated at
//! trainable inducing inputs) and a parametric cosine used by the
//! mountain-car example.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::{cholesky_psd, symmetrize};

/// Squared-exponential kernel hyperparameters, stored in log-space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelHyper {
    pub log_lengthscale: Vec<f64>,
    pub log_signal_var: f64,
    pub log_noise_var: f64,
}

impl KernelHyper {
    pub fn new(lengthscale: &[f64], signal_var: f64, noise_var: f64) -> Self {
        assert!(lengthscale.iter().all(|&l| l > 0.0));
        assert!(signal_var > 0.0 && noise_var > 0.0);
        Self {
            log_lengthscale: lengthscale.iter().map(|l| l.ln()).collect(),
            log_signal_var: signal_var.ln(),
            log_noise_var: noise_var.ln(),
        }
    }

    pub fn lengthscale(&self, j: usize) -> f64 {
        self.log_lengthscale[j].exp()
    }

    pub fn signal_var(&self) -> f64 {
        self.log_signal_var.exp()
    }

    pub fn noise_var(&self) -> f64 {
        self.log_noise_var.exp()
    }

    pub fn input_dim(&self) -> usize {
        self.log_lengthscale.len()
    }
}

/// k(x, x') = sigma_f^2 exp(-sum_j (x_j - x'_j)^2 / (2 l_j^2))
pub fn se_kernel(x: &[f64], x2: &[f64], h: &KernelHyper) -> f64 {
    debug_assert_eq!(x.len(), x2.len());
    debug_assert_eq!(x.len(), h.input_dim());
    let mut q = 0.0;
    for j in 0..x.len() {
        let l = h.lengthscale(j);
        let d = (x[j] - x2[j]) / l;
        q += d * d;
    }
    h.signal_var() * (-0.5 * q).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisKind {
    SubsetOfRegressors,
    ParametricCosine,
}

/// Finite basis set Phi = [phi_1, ..., phi_E].
#[derive(Debug, Clone)]
pub struct BasisSet {
    pub kind: BasisKind,
    /// Inducing inputs, E x d (subset of regressors only).
    pub inducing: DMatrix<f64>,
    /// Sampling step T_s (cosine only).
    pub step: f64,
    /// Cosine frequency sigma (cosine only).
    pub freq: f64,
    pub kernel: KernelHyper,
}

impl BasisSet {
    pub fn subset_of_regressors(inducing: DMatrix<f64>, kernel: KernelHyper) -> Self {
        assert!(inducing.nrows() >= 1);
        assert_eq!(inducing.ncols(), kernel.input_dim());
        assert!(inducing.iter().all(|v| v.is_finite()));
        Self {
            kind: BasisKind::SubsetOfRegressors,
            inducing,
            step: 0.0,
            freq: 0.0,
            kernel,
        }
    }

    /// phi(p) = -T_s cos(sigma p); one-dimensional input, E = 1.
    pub fn parametric_cosine(step: f64, freq: f64, kernel: KernelHyper) -> Self {
        assert!(step > 0.0);
        Self {
            kind: BasisKind::ParametricCosine,
            inducing: DMatrix::zeros(0, 1),
            step,
            freq,
            kernel,
        }
    }

    pub fn num_features(&self) -> usize {
        match self.kind {
            BasisKind::SubsetOfRegressors => self.inducing.nrows(),
            BasisKind::ParametricCosine => 1,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self.kind {
            BasisKind::SubsetOfRegressors => self.inducing.ncols(),
            BasisKind::ParametricCosine => 1,
        }
    }

    pub fn noise_var(&self) -> f64 {
        self.kernel.noise_var()
    }
}

/// Gaussian prior over basis weights.
#[derive(Debug, Clone)]
pub struct WeightPrior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Evaluate the basis at one input.
pub fn features(basis: &BasisSet, x: &[f64]) -> Result<DVector<f64>> {
    if x.len() != basis.input_dim() {
        return Err(Error::dim(basis.input_dim(), x.len(), "features input"));
    }
    match basis.kind {
        BasisKind::SubsetOfRegressors => {
            let e = basis.num_features();
            let mut out = DVector::zeros(e);
            for i in 0..e {
                let zi: Vec<f64> = basis.inducing.row(i).iter().copied().collect();
                out[i] = se_kernel(&zi, x, &basis.kernel);
            }
            Ok(out)
        }
        BasisKind::ParametricCosine => {
            Ok(DVector::from_vec(vec![-basis.step * (basis.freq * x[0]).cos()]))
        }
    }
}

/// Row i of the result is `features(basis, X_i)`.
pub fn feature_matrix(basis: &BasisSet, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != basis.input_dim() && x.nrows() > 0 {
        return Err(Error::dim(basis.input_dim(), x.ncols(), "feature_matrix input"));
    }
    let n = x.nrows();
    let e = basis.num_features();
    let mut out = DMatrix::zeros(n, e);
    let mut row = vec![0.0; basis.input_dim()];
    for i in 0..n {
        for j in 0..basis.input_dim() {
            row[j] = x[(i, j)];
        }
        let f = features(basis, &row)?;
        out.set_row(i, &f.transpose());
    }
    Ok(out)
}

/// Kernel Gram matrix on the rows of `x`.
pub fn gram_matrix(x: &DMatrix<f64>, h: &KernelHyper) -> DMatrix<f64> {
    let n = x.nrows();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        let xi: Vec<f64> = x.row(i).iter().copied().collect();
        for j in i..n {
            let xj: Vec<f64> = x.row(j).iter().copied().collect();
            let v = se_kernel(&xi, &xj, h);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Zero-mean prior with covariance `(K_ZZ + eps I)^-1`, so that
/// `Phi Sigma_0 Phi^T` is the Nystrom approximation of the kernel prior.
pub fn nystrom_prior(basis: &BasisSet) -> Result<WeightPrior> {
    assert_eq!(basis.kind, BasisKind::SubsetOfRegressors);
    let e = basis.num_features();
    let kzz = gram_matrix(&basis.inducing, &basis.kernel);
    let eps = 1e-8 * kzz.trace() / e as f64;
    let chol = cholesky_psd(&kzz, eps)?;
    let inv = chol
        .solve_mat(&DMatrix::identity(e, e))
        .ok_or(Error::NotPsd { max_jitter: eps })?;
    Ok(WeightPrior {
        mean: DVector::zeros(e),
        cov: symmetrize(&inv),
    })
}

/// Zero-mean prior with diagonal covariance `lambda I`; alternative to the
/// Nystrom-consistent prior, selected by config.
pub fn diagonal_prior(basis: &BasisSet, lambda: f64) -> WeightPrior {
    assert!(lambda > 0.0);
    let e = basis.num_features();
    WeightPrior {
        mean: DVector::zeros(e),
        cov: DMatrix::identity(e, e) * lambda,
    }
}

/// Default weight prior: Nystrom for subset-of-regressors, `N(0, sigma_f^2)`
/// for the single cosine weight.
pub fn default_prior(basis: &BasisSet) -> Result<WeightPrior> {
    match basis.kind {
        BasisKind::SubsetOfRegressors => nystrom_prior(basis),
        BasisKind::ParametricCosine => Ok(diagonal_prior(basis, basis.kernel.signal_var())),
    }
}

/// JSON wire format for [`BasisSet`].
#[derive(Debug, Serialize, Deserialize)]
pub struct BasisSetJson {
    pub kind: BasisKind,
    /// Row-major inducing inputs; one inner vec per row.
    #[serde(rename = "Z")]
    pub z: Vec<Vec<f64>>,
    #[serde(rename = "T_s")]
    pub t_s: f64,
    pub sigma: f64,
    pub log_lengthscale: Vec<f64>,
    pub log_signal_var: f64,
    pub log_noise_var: f64,
}

impl From<&BasisSet> for BasisSetJson {
    fn from(b: &BasisSet) -> Self {
        Self {
            kind: b.kind,
            z: (0..b.inducing.nrows())
                .map(|i| b.inducing.row(i).iter().copied().collect())
                .collect(),
            t_s: b.step,
            sigma: b.freq,
            log_lengthscale: b.kernel.log_lengthscale.clone(),
            log_signal_var: b.kernel.log_signal_var,
            log_noise_var: b.kernel.log_noise_var,
        }
    }
}

impl TryFrom<BasisSetJson> for BasisSet {
    type Error = Error;

    fn try_from(j: BasisSetJson) -> Result<Self> {
        let kernel = KernelHyper {
            log_lengthscale: j.log_lengthscale,
            log_signal_var: j.log_signal_var,
            log_noise_var: j.log_noise_var,
        };
        match j.kind {
            BasisKind::SubsetOfRegressors => {
                let rows = j.z.len();
                let cols = kernel.input_dim();
                if j.z.iter().any(|r| r.len() != cols) {
                    return Err(Error::Config("ragged inducing input rows".into()));
                }
                let data: Vec<f64> = j.z.into_iter().flatten().collect();
                let z = DMatrix::from_row_slice(rows, cols, &data);
                Ok(BasisSet::subset_of_regressors(z, kernel))
            }
            BasisKind::ParametricCosine => Ok(BasisSet::parametric_cosine(j.t_s, j.sigma, kernel)),
        }
    }
}

impl BasisSet {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&BasisSetJson::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: BasisSetJson = serde_json::from_str(s)?;
        Self::try_from(j)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hyper_1d() -> KernelHyper {
        KernelHyper::new(&[1.0], 1.0, 0.01)
    }

    #[test]
    fn se_kernel_zero_distance() {
        let h = KernelHyper::new(&[0.7, 1.3], 2.5, 0.01);
        let x = [0.4, -1.0];
        assert_relative_eq!(se_kernel(&x, &x, &h), 2.5, epsilon = 1e-14);
    }

    #[test]
    fn se_kernel_unit_distance() {
        // |x - x'| = sqrt(2), l = 1, sigma_f^2 = 1 -> e^-1
        let h = hyper_1d();
        let h2 = KernelHyper::new(&[1.0, 1.0], 1.0, 0.01);
        assert_relative_eq!(
            se_kernel(&[0.0, 0.0], &[1.0, 1.0], &h2),
            (-1.0f64).exp(),
            epsilon = 1e-12
        );
        assert_relative_eq!(
            se_kernel(&[0.0], &[2.0f64.sqrt()], &h),
            0.36787944117144233,
            epsilon = 1e-10
        );
    }

    #[test]
    fn se_kernel_symmetric_and_bounded() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let h = KernelHyper::new(&[0.5, 2.0], 1.7, 0.01);
        for _ in 0..50 {
            let x = [r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0)];
            let y = [r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0)];
            let k1 = se_kernel(&x, &y, &h);
            let k2 = se_kernel(&y, &x, &h);
            assert_eq!(k1, k2);
            assert!(k1 > 0.0 && k1 <= 1.7 + 1e-12);
        }
    }

    #[test]
    fn gram_matrix_is_psd() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let x = DMatrix::from_fn(20, 2, |_, _| r.gen_range(-2.0..2.0));
        let h = KernelHyper::new(&[0.8, 0.8], 1.0, 0.01);
        let k = gram_matrix(&x, &h);
        let eig = nalgebra::SymmetricEigen::new(k);
        assert!(eig.eigenvalues.iter().all(|&e| e >= -1e-10));
    }

    #[test]
    fn sor_features_at_inducing_point() {
        let z = DMatrix::from_row_slice(3, 1, &[-1.0, 0.0, 1.0]);
        let h = KernelHyper::new(&[1.0], 2.0, 0.01);
        let b = BasisSet::subset_of_regressors(z, h);
        let f = features(&b, &[0.0]).unwrap();
        assert_relative_eq!(f[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn cosine_feature_values() {
        let b = BasisSet::parametric_cosine(0.2, 3.0, hyper_1d());
        let f = features(&b, &[0.0]).unwrap();
        assert_relative_eq!(f[0], -0.2, epsilon = 1e-14);
        let f = features(&b, &[std::f64::consts::FRAC_PI_2 / 3.0]).unwrap();
        assert_relative_eq!(f[0], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn feature_matrix_empty_input() {
        let b = BasisSet::parametric_cosine(0.2, 3.0, hyper_1d());
        let m = feature_matrix(&b, &DMatrix::zeros(0, 1)).unwrap();
        assert_eq!(m.shape(), (0, 1));
    }

    #[test]
    fn feature_matrix_on_inducing_equals_gram() {
        let z = DMatrix::from_row_slice(4, 1, &[-1.0, -0.2, 0.5, 1.4]);
        let h = KernelHyper::new(&[0.6], 1.3, 0.01);
        let b = BasisSet::subset_of_regressors(z.clone(), h.clone());
        let m = feature_matrix(&b, &z).unwrap();
        let k = gram_matrix(&z, &h);
        assert_relative_eq!(m, k.transpose(), epsilon = 1e-12);
    }

    #[test]
    fn feature_matrix_matches_rowwise_loop() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let z = DMatrix::from_fn(5, 2, |_, _| r.gen_range(-1.0..1.0));
        let h = KernelHyper::new(&[0.9, 1.1], 1.0, 0.01);
        let b = BasisSet::subset_of_regressors(z, h);
        let x = DMatrix::from_fn(11, 2, |_, _| r.gen_range(-2.0..2.0));
        let m = feature_matrix(&b, &x).unwrap();
        for i in 0..x.nrows() {
            let f = features(&b, &[x[(i, 0)], x[(i, 1)]]).unwrap();
            for e in 0..b.num_features() {
                assert_eq!(m[(i, e)], f[e]);
            }
        }
    }

    #[test]
    fn nystrom_prior_scalar_inverse() {
        let z = DMatrix::from_row_slice(1, 1, &[0.3]);
        let h = KernelHyper::new(&[1.0], 4.0, 0.01);
        let b = BasisSet::subset_of_regressors(z, h);
        let p = nystrom_prior(&b).unwrap();
        assert_relative_eq!(p.cov[(0, 0)], 0.25, epsilon = 1e-6);
        assert_eq!(p.mean[0], 0.0);
    }

    #[test]
    fn nystrom_exact_when_inducing_cover_data() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let x = DMatrix::from_fn(8, 1, |_, _| r.gen_range(-2.0..2.0));
        let h = KernelHyper::new(&[0.8], 1.5, 0.01);
        let b = BasisSet::subset_of_regressors(x.clone(), h.clone());
        let p = nystrom_prior(&b).unwrap();
        let phi = feature_matrix(&b, &x).unwrap();
        let approx_k = &phi * &p.cov * phi.transpose();
        let k = gram_matrix(&x, &h);
        assert!((approx_k - &k).norm() / k.norm() <= 1e-5);
    }

    #[test]
    fn nystrom_dominated_by_true_kernel() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let z = DMatrix::from_fn(4, 1, |_, _| r.gen_range(-2.0..2.0));
        let mut xdata: Vec<f64> = z.iter().copied().collect();
        for _ in 0..8 {
            xdata.push(r.gen_range(-2.0..2.0));
        }
        let x = DMatrix::from_column_slice(xdata.len(), 1, &xdata);
        let h = KernelHyper::new(&[0.8], 1.0, 0.01);
        let b = BasisSet::subset_of_regressors(z, h.clone());
        let p = nystrom_prior(&b).unwrap();
        let phi = feature_matrix(&b, &x).unwrap();
        let diff = gram_matrix(&x, &h) - &phi * &p.cov * phi.transpose();
        let eig = nalgebra::SymmetricEigen::new(crate::gauss::symmetrize(&diff));
        assert!(eig.eigenvalues.iter().all(|&e| e >= -1e-8), "{:?}", eig.eigenvalues);
    }

    #[test]
    fn features_lipschitz_smoke() {
        let b = BasisSet::parametric_cosine(0.2, 3.0, hyper_1d());
        let d = 1e-6;
        let f0 = features(&b, &[0.4]).unwrap()[0];
        let f1 = features(&b, &[0.4 + d]).unwrap()[0];
        // |d phi / dp| <= T_s * sigma
        assert!((f1 - f0).abs() <= 0.2 * 3.0 * d * 1.01);
    }

    #[test]
    fn basis_json_roundtrip() {
        let z = DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        let b = BasisSet::subset_of_regressors(z, KernelHyper::new(&[0.5, 0.9], 1.2, 0.02));
        let s = b.to_json().unwrap();
        let back = BasisSet::from_json(&s).unwrap();
        assert_eq!(back.inducing, b.inducing);
        assert_eq!(back.kernel.log_signal_var, b.kernel.log_signal_var);
        assert_eq!(back.kind, BasisKind::SubsetOfRegressors);
    }
}
