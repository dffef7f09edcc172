//! Mountain-car plant: exact discrete map with a slope residual that is
//! linear in the task parameter.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MountainCarParams {
    /// Sampling time [s].
    pub t_s: f64,
    /// Slope gain (the task parameter).
    pub theta1: f64,
    /// Actuator gain.
    pub theta2: f64,
    /// Std of the additive velocity disturbance.
    pub process_noise_std: f64,
}

impl Default for MountainCarParams {
    fn default() -> Self {
        Self {
            t_s: 0.2,
            theta1: 0.5,
            theta2: 0.3,
            process_noise_std: 0.001,
        }
    }
}

/// One exact step of the discrete dynamics:
/// `p' = p + T_s v`, `v' = v - T_s cos(3p) theta1 + T_s u theta2 + noise`.
/// The frequency 3 is the true-plant constant; the learnable frequency lives
/// in the basis set.
pub fn mountain_car_step(state: (f64, f64), u: f64, params: &MountainCarParams, noise: f64) -> (f64, f64) {
    let (p, v) = state;
    let p_next = p + params.t_s * v;
    let v_next = v - params.t_s * (3.0 * p).cos() * params.theta1 + params.t_s * u * params.theta2 + noise;
    (p_next, v_next)
}

/// Noise-free residual mean `-T_s cos(3p) theta1`.
pub fn mountain_car_residual(p: f64, theta1: f64, t_s: f64) -> f64 {
    -t_s * (3.0 * p).cos() * theta1
}
