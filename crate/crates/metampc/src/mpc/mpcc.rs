//! Model predictive contouring control for the race car. Progress along
//! the centerline is carried as an auxiliary state integrated from the
//! projected velocity, so stage costs only need spline lookups, never a
//! geometric projection inside the solver.

use nalgebra::DVector;

use crate::blr::LinearPosterior;
use crate::envs::{car_step_model, CarParams, CarState, Track};
use crate::features::{features, BasisSet};
use crate::mpc::solver::Ocp;

/// Extended solver state: the six car states, centerline progress, and the
/// previously applied input pair (for rate penalties).
pub const MPCC_STATE_DIM: usize = 9;
pub const IDX_S: usize = 6;
pub const IDX_UPREV: usize = 7;

#[derive(Debug, Clone)]
pub struct MpccConfig {
    pub horizon: usize,
    /// Contouring (lateral) error weight.
    pub q_c: f64,
    /// Lag (longitudinal) error weight.
    pub q_l: f64,
    /// Progress reward per meter.
    pub gamma: f64,
    pub r_d_throttle: f64,
    pub r_d_steer: f64,
    pub r_throttle: f64,
    pub r_steer: f64,
    /// Quadratic hinge on lateral error beyond `half_width - bound_margin`.
    pub bound_weight: f64,
    pub bound_margin: f64,
    pub max_iters: usize,
}

impl Default for MpccConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            q_c: 150.0,
            q_l: 80.0,
            gamma: 4.0,
            r_d_throttle: 0.2,
            r_d_steer: 0.5,
            r_throttle: 0.01,
            r_steer: 0.05,
            bound_weight: 2000.0,
            bound_margin: 0.05,
            max_iters: 20,
        }
    }
}

/// Learned lateral tire forces: one basis over the negated slip angle,
/// separate weight posteriors per axle, and fixed output scales chosen so
/// the regression targets are order one.
pub struct TireModel {
    pub basis: BasisSet,
    pub post_f: LinearPosterior,
    pub post_r: LinearPosterior,
    pub scale_f: f64,
    pub scale_r: f64,
}

impl TireModel {
    /// Regression feature input for a slip angle (sign flipped so that the
    /// learned curve has positive initial slope, like the training data).
    pub fn feature_arg(slip: f64) -> f64 {
        -slip
    }

    pub fn force_front(&self, s_f: f64) -> f64 {
        let phi = features(&self.basis, &[Self::feature_arg(s_f)]).expect("tire feature dims");
        self.scale_f * phi.dot(&self.post_f.mu)
    }

    pub fn force_rear(&self, s_r: f64) -> f64 {
        let phi = features(&self.basis, &[Self::feature_arg(s_r)]).expect("tire feature dims");
        self.scale_r * phi.dot(&self.post_r.mu)
    }

    pub fn forces(&self, s_f: f64, s_r: f64) -> (f64, f64) {
        (self.force_front(s_f), self.force_rear(s_r))
    }

    /// Sample the posterior-mean forces on a uniform slip grid. The solver
    /// evaluates the tire model thousands of times per control step; a
    /// piecewise-linear table makes those lookups allocation- and
    /// transcendental-free at negligible accuracy cost.
    pub fn tabulate(&self, lo: f64, hi: f64, n: usize) -> TireTable {
        assert!(n >= 2 && hi > lo);
        let step = (hi - lo) / (n - 1) as f64;
        let mut front = Vec::with_capacity(n);
        let mut rear = Vec::with_capacity(n);
        for i in 0..n {
            let slip = lo + step * i as f64;
            front.push(self.force_front(slip));
            rear.push(self.force_rear(slip));
        }
        TireTable { lo, step, front, rear }
    }
}

/// Piecewise-linear tabulation of a [`TireModel`]'s posterior-mean forces
/// over a slip interval; inputs outside the interval clamp to the ends.
pub struct TireTable {
    lo: f64,
    step: f64,
    front: Vec<f64>,
    rear: Vec<f64>,
}

impl TireTable {
    fn interp(&self, table: &[f64], slip: f64) -> f64 {
        let t = ((slip - self.lo) / self.step).clamp(0.0, (table.len() - 1) as f64);
        let i = (t as usize).min(table.len() - 2);
        let frac = t - i as f64;
        table[i] + frac * (table[i + 1] - table[i])
    }

    pub fn forces(&self, s_f: f64, s_r: f64) -> (f64, f64) {
        (self.interp(&self.front, s_f), self.interp(&self.rear, s_r))
    }
}

/// Velocity component along the track tangent at progress `s`.
pub fn projected_velocity(track: &Track, x: &[f64]) -> f64 {
    let g = track.center_tangent_fast(x[IDX_S]);
    projected_velocity_at(&g, x)
}

/// As [`projected_velocity`] with the centerline geometry already looked up.
/// Uses tangent components directly, so no angle wrapping is needed:
/// cos(psi - theta_t) = cos(psi)tan_x + sin(psi)tan_y and similarly for sin.
fn projected_velocity_at(g: &[f64; 4], x: &[f64]) -> f64 {
    let (cp, sp) = (x[2].cos(), x[2].sin());
    let cos_d = cp * g[2] + sp * g[3];
    let sin_d = sp * g[2] - cp * g[3];
    x[3] * cos_d - x[4] * sin_d
}

fn car_state_of(x: &[f64]) -> CarState {
    CarState {
        x: x[0],
        y: x[1],
        psi: x[2],
        v_x: x[3],
        v_y: x[4],
        omega: x[5],
    }
}

/// Build the contouring OCP around a force model closure. The model is read
/// through the borrow at every evaluation, so posterior updates between
/// control steps take effect without rebuilding the problem.
pub fn build_mpcc_ocp<'a>(
    track: &'a Track,
    car: &'a CarParams,
    force_fn: &'a (dyn Fn(f64, f64) -> (f64, f64) + 'a),
    cfg: &'a MpccConfig,
) -> Ocp<'a> {
    let t_s = car.t_s;
    let stage = move |x: &[f64], u: &[f64], terminal: bool| -> f64 {
        let g = track.center_tangent_fast(x[IDX_S]);
        let (tx, ty) = (g[2], g[3]);
        let dx = x[0] - g[0];
        let dy = x[1] - g[1];
        let e_c = dy * tx - dx * ty;
        let e_l = dx * tx + dy * ty;
        let mut cost = cfg.q_c * e_c * e_c + cfg.q_l * e_l * e_l;
        let slack = e_c.abs() - (track.half_width - cfg.bound_margin);
        if slack > 0.0 {
            cost += cfg.bound_weight * slack * slack;
        }
        if !terminal {
            cost -= cfg.gamma * t_s * projected_velocity_at(&g, x);
            let du_t = u[0] - x[IDX_UPREV];
            let du_s = u[1] - x[IDX_UPREV + 1];
            cost += cfg.r_d_throttle * du_t * du_t + cfg.r_d_steer * du_s * du_s;
            cost += cfg.r_throttle * u[0] * u[0] + cfg.r_steer * u[1] * u[1];
        }
        cost
    };
    Ocp {
        horizon: cfg.horizon,
        state_dim: MPCC_STATE_DIM,
        input_dim: 2,
        dynamics: Box::new(move |x, u, _, out| {
            let next = car_step_model(&car_state_of(x), (u[0], u[1]), car, force_fn);
            out[0] = next.x;
            out[1] = next.y;
            out[2] = next.psi;
            out[3] = next.v_x;
            out[4] = next.v_y;
            out[5] = next.omega;
            out[IDX_S] = x[IDX_S] + t_s * projected_velocity(track, x);
            out[IDX_UPREV] = u[0];
            out[IDX_UPREV + 1] = u[1];
        }),
        stage_cost: Box::new(move |x, u, _| stage(x, u, false)),
        terminal_cost: Box::new(move |x| stage(x, &[0.0, 0.0], true)),
        input_lower: vec![-car.throttle_max, -car.steer_max],
        input_upper: vec![car.throttle_max, car.steer_max],
        max_iters: cfg.max_iters,
    }
}

/// Extended initial state for the solver from a plant state, its projection
/// and the last applied input.
pub fn mpcc_initial_state(state: &CarState, s_proj: f64, u_prev: (f64, f64)) -> [f64; MPCC_STATE_DIM] {
    [
        state.x, state.y, state.psi, state.v_x, state.v_y, state.omega, s_proj, u_prev.0, u_prev.1,
    ]
}

/// Ground-truth tire posterior for a known Pacejka curve: a least-squares
/// fit of the basis to the true normalized force over the slip range the
/// car encounters. Used by oracle controllers in tests and experiments.
pub fn fit_tire_posterior(
    basis: &BasisSet,
    truth: &dyn Fn(f64) -> f64,
    scale: f64,
    lo: f64,
    hi: f64,
    n: usize,
) -> LinearPosterior {
    use crate::blr::blr_fit;
    use crate::features::{feature_matrix, WeightPrior};
    use nalgebra::DMatrix;
    let xs = DMatrix::from_fn(n, 1, |i, _| lo + (hi - lo) * i as f64 / (n - 1) as f64);
    let ys = DVector::from_fn(n, |i, _| truth(xs[(i, 0)]) / scale);
    let e = basis.num_features();
    let prior = WeightPrior {
        mean: DVector::zeros(e),
        cov: DMatrix::identity(e, e) * 1e4,
    };
    let phi = feature_matrix(basis, &xs).expect("tire fit dims");
    blr_fit(&phi, &ys, 1e-6, &prior).expect("tire fit")
}
