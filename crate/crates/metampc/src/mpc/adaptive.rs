//! Learned residual dynamics: a nominal model plus basis-function means
//! whose weights are adapted online.

use crate::blr::LinearPosterior;
use crate::features::{features, BasisSet};

/// Where one coordinate of a residual's feature input comes from.
#[derive(Debug, Clone, Copy)]
pub enum FeatureSource {
    State(usize),
    Input(usize),
}

/// One learned scalar residual: basis, current weight posterior, the
/// next-state component it corrects and the feature input layout.
pub struct ResidualModel {
    pub basis: BasisSet,
    pub posterior: LinearPosterior,
    pub target: usize,
    pub sources: Vec<FeatureSource>,
}

impl ResidualModel {
    pub fn feature_input(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        self.sources
            .iter()
            .map(|s| match *s {
                FeatureSource::State(i) => x[i],
                FeatureSource::Input(i) => u[i],
            })
            .collect()
    }

    /// Posterior-mean residual at `(x, u)`. Dimensions are fixed at
    /// construction, so the feature evaluation cannot fail here.
    pub fn mean(&self, x: &[f64], u: &[f64]) -> f64 {
        let z = self.feature_input(x, u);
        features(&self.basis, &z).expect("residual feature dims").dot(&self.posterior.mu)
    }
}

/// Wrap a nominal dynamics map with additive posterior-mean corrections.
/// Residual weights are read through the borrow on every call, so updates
/// between solver invocations take effect immediately.
pub fn adaptive_dynamics<'a>(
    nominal: Box<dyn Fn(&[f64], &[f64], usize, &mut [f64]) + 'a>,
    residuals: &'a [ResidualModel],
) -> Box<dyn Fn(&[f64], &[f64], usize, &mut [f64]) + 'a> {
    Box::new(move |x, u, k, out| {
        nominal(x, u, k, out);
        for r in residuals {
            out[r.target] += r.mean(x, u);
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{BasisSet, KernelHyper};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    fn cosine_residual(mu: f64) -> ResidualModel {
        let basis = BasisSet::parametric_cosine(0.2, 3.0, KernelHyper::new(&[1.0], 1.0, 4e-4));
        let e = basis.num_features();
        ResidualModel {
            basis,
            posterior: LinearPosterior {
                mu: DVector::from_element(e, mu),
                sigma: DMatrix::identity(e, e),
            },
            target: 1,
            sources: vec![FeatureSource::State(0)],
        }
    }

    #[test]
    fn adds_residual_mean_to_target() {
        let res = [cosine_residual(0.65)];
        let nominal: Box<dyn Fn(&[f64], &[f64], usize, &mut [f64])> =
            Box::new(|x, u, _, out| {
                out[0] = x[0] + 0.2 * x[1];
                out[1] = x[1] + 0.2 * u[0] * 0.3;
            });
        let dyn_fn = adaptive_dynamics(nominal, &res);
        let mut out = [0.0; 2];
        dyn_fn(&[0.0, 0.1], &[0.5], 0, &mut out);
        // Residual at p = 0: -T_s cos(0) * 0.65 = -0.13.
        assert_relative_eq!(out[0], 0.02, epsilon = 1e-15);
        assert_relative_eq!(out[1], 0.1 + 0.2 * 0.5 * 0.3 - 0.13, epsilon = 1e-12);
    }

    #[test]
    fn feature_input_selects_state_and_input() {
        let mut r = cosine_residual(1.0);
        r.sources = vec![FeatureSource::Input(1), FeatureSource::State(2)];
        let z = r.feature_input(&[9.0, 9.0, 3.0], &[9.0, 7.0]);
        assert_eq!(z.as_slice(), &[7.0, 3.0]);
    }
}
