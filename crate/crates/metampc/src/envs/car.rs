//! Single-track dynamic bicycle with simplified Pacejka lateral tire forces.
//!
//! Default parameters target a 1:43-scale car; all of them are configuration
//! values, loadable from file.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Minimum longitudinal speed; prevents the slip-angle singularity at
/// standstill.
pub const V_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PacejkaParams {
    pub b_f: f64,
    pub c_f: f64,
    pub d_f: f64,
    pub b_r: f64,
    pub c_r: f64,
    pub d_r: f64,
}

impl Default for PacejkaParams {
    fn default() -> Self {
        Self {
            b_f: 2.58,
            c_f: 1.2,
            d_f: 0.192,
            b_r: 3.38,
            c_r: 1.26,
            d_r: 0.173,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CarState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v_x: f64,
    pub v_y: f64,
    pub omega: f64,
}

impl CarState {
    pub fn at_rest(x: f64, y: f64, psi: f64) -> Self {
        Self {
            x,
            y,
            psi,
            v_x: V_FLOOR,
            v_y: 0.0,
            omega: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CarParams {
    pub mass: f64,
    pub i_z: f64,
    pub l_f: f64,
    pub l_r: f64,
    /// Drivetrain gain [N per unit throttle].
    pub c_m: f64,
    /// Aerodynamic drag [N s^2 / m^2].
    pub c_d: f64,
    /// Rolling resistance [N].
    pub c_roll: f64,
    pub throttle_max: f64,
    pub steer_max: f64,
    pub t_s: f64,
}

impl Default for CarParams {
    fn default() -> Self {
        Self {
            mass: 0.041,
            i_z: 2.78e-5,
            l_f: 0.029,
            l_r: 0.033,
            c_m: 0.287,
            c_d: 0.0012,
            c_roll: 0.005,
            throttle_max: 1.0,
            steer_max: 0.4,
            t_s: 0.02,
        }
    }
}

/// Simplified magic formula `D sin(C arctan(B s))`.
pub fn pacejka_force(s: f64, b: f64, c: f64, d: f64) -> f64 {
    d * (c * (b * s).atan()).sin()
}

/// Front and rear slip angles from standard bicycle kinematics.
pub fn slip_angles(state: &CarState, delta: f64, params: &CarParams) -> (f64, f64) {
    let s_f = (state.v_y + params.l_f * state.omega).atan2(state.v_x) - delta;
    let s_r = (state.v_y - params.l_r * state.omega).atan2(state.v_x);
    (s_f, s_r)
}

/// Body-frame derivatives with lateral tire forces supplied by `force_fn`,
/// which maps the front and rear slip angles to signed forces. Lets a
/// controller predict with a learned force model instead of the true tires.
pub fn car_derivatives_with_forces(
    state: &CarState,
    throttle: f64,
    delta: f64,
    car: &CarParams,
    force_fn: &dyn Fn(f64, f64) -> (f64, f64),
) -> [f64; 6] {
    let (s_f, s_r) = slip_angles(state, delta, car);
    let (f_f, f_r) = force_fn(s_f, s_r);
    let f_x = car.c_m * throttle - car.c_d * state.v_x * state.v_x - car.c_roll;
    let (sp, cp) = state.psi.sin_cos();
    let (sd, cd) = delta.sin_cos();
    [
        state.v_x * cp - state.v_y * sp,
        state.v_x * sp + state.v_y * cp,
        state.omega,
        (f_x - f_f * sd + car.mass * state.v_y * state.omega) / car.mass,
        (f_r + f_f * cd - car.mass * state.v_x * state.omega) / car.mass,
        (f_f * car.l_f * cd - f_r * car.l_r) / car.i_z,
    ]
}

/// Pacejka forces of the true plant. The magic formula is applied to the
/// negated slip angle so that lateral force opposes slip and straight
/// driving is a stable equilibrium.
pub fn pacejka_slip_forces(s_f: f64, s_r: f64, tires: &PacejkaParams) -> (f64, f64) {
    (
        pacejka_force(-s_f, tires.b_f, tires.c_f, tires.d_f),
        pacejka_force(-s_r, tires.b_r, tires.c_r, tires.d_r),
    )
}

fn derivatives(
    state: &CarState,
    throttle: f64,
    delta: f64,
    car: &CarParams,
    tires: &PacejkaParams,
) -> [f64; 6] {
    car_derivatives_with_forces(state, throttle, delta, car, &|s_f, s_r| {
        pacejka_slip_forces(s_f, s_r, tires)
    })
}

fn add_scaled(state: &CarState, k: &[f64; 6], h: f64) -> CarState {
    CarState {
        x: state.x + h * k[0],
        y: state.y + h * k[1],
        psi: state.psi + h * k[2],
        v_x: state.v_x + h * k[3],
        v_y: state.v_y + h * k[4],
        omega: state.omega + h * k[5],
    }
}

/// RK4 integration over one sampling period, inputs clamped to bounds,
/// additive noise applied to `(v_y, omega)` after the step, `v_x` floored.
pub fn car_step(
    state: &CarState,
    input: (f64, f64),
    car: &CarParams,
    tires: &PacejkaParams,
    noise: (f64, f64),
) -> CarState {
    car_step_dt(state, input, car, tires, noise, car.t_s, 1)
}

/// As [`car_step`] with an explicit step length and substep count; used by
/// convergence tests.
pub fn car_step_dt(
    state: &CarState,
    input: (f64, f64),
    car: &CarParams,
    tires: &PacejkaParams,
    noise: (f64, f64),
    dt_total: f64,
    substeps: usize,
) -> CarState {
    let throttle = input.0.clamp(-car.throttle_max, car.throttle_max);
    let delta = input.1.clamp(-car.steer_max, car.steer_max);
    let h = dt_total / substeps as f64;
    let mut s = *state;
    s.v_x = s.v_x.max(V_FLOOR);
    for _ in 0..substeps {
        let k1 = derivatives(&s, throttle, delta, car, tires);
        let k2 = derivatives(&add_scaled(&s, &k1, h / 2.0), throttle, delta, car, tires);
        let k3 = derivatives(&add_scaled(&s, &k2, h / 2.0), throttle, delta, car, tires);
        let k4 = derivatives(&add_scaled(&s, &k3, h), throttle, delta, car, tires);
        let mut inc = [0.0; 6];
        for i in 0..6 {
            inc[i] = h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        s = add_scaled(&s, &inc, 1.0);
        s.v_x = s.v_x.max(V_FLOOR);
    }
    s.v_y += noise.0;
    s.omega += noise.1;
    s
}

/// Forward Euler with substeps; fine-integration oracle for tests.
pub fn car_step_euler(
    state: &CarState,
    input: (f64, f64),
    car: &CarParams,
    tires: &PacejkaParams,
    dt_total: f64,
    substeps: usize,
) -> CarState {
    let throttle = input.0.clamp(-car.throttle_max, car.throttle_max);
    let delta = input.1.clamp(-car.steer_max, car.steer_max);
    let h = dt_total / substeps as f64;
    let mut s = *state;
    s.v_x = s.v_x.max(V_FLOOR);
    for _ in 0..substeps {
        let k = derivatives(&s, throttle, delta, car, tires);
        s = add_scaled(&s, &k, h);
        s.v_x = s.v_x.max(V_FLOOR);
    }
    s
}

/// Noise-free RK4 step with a custom lateral-force model; the controller's
/// prediction model. Same clamping and velocity floor as [`car_step`].
pub fn car_step_model(
    state: &CarState,
    input: (f64, f64),
    car: &CarParams,
    force_fn: &dyn Fn(f64, f64) -> (f64, f64),
) -> CarState {
    let throttle = input.0.clamp(-car.throttle_max, car.throttle_max);
    let delta = input.1.clamp(-car.steer_max, car.steer_max);
    let h = car.t_s;
    let mut s = *state;
    s.v_x = s.v_x.max(V_FLOOR);
    let k1 = car_derivatives_with_forces(&s, throttle, delta, car, force_fn);
    let k2 = car_derivatives_with_forces(&add_scaled(&s, &k1, h / 2.0), throttle, delta, car, force_fn);
    let k3 = car_derivatives_with_forces(&add_scaled(&s, &k2, h / 2.0), throttle, delta, car, force_fn);
    let k4 = car_derivatives_with_forces(&add_scaled(&s, &k3, h), throttle, delta, car, force_fn);
    let mut inc = [0.0; 6];
    for i in 0..6 {
        inc[i] = h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    s = add_scaled(&s, &inc, 1.0);
    s.v_x = s.v_x.max(V_FLOOR);
    s
}

/// Deterministic tire-parameter generator for meta-training tasks: grip
/// factors on `linspace(0.6, 1.2, M)` scale the peak forces, and the
/// stiffness/shape factors are perturbed by up to 10%.
pub fn make_task_tires(base: &PacejkaParams, task_index: usize, m: usize, seed: u64) -> PacejkaParams {
    assert!(task_index < m);
    let g = if m == 1 {
        0.6
    } else {
        0.6 + (1.2 - 0.6) * task_index as f64 / (m - 1) as f64
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(task_index as u64));
    let pert = |rng: &mut ChaCha8Rng| 1.0 + rng.gen_range(-0.1..0.1);
    PacejkaParams {
        b_f: base.b_f * pert(&mut rng),
        c_f: base.c_f * pert(&mut rng),
        d_f: base.d_f * g,
        b_r: base.b_r * pert(&mut rng),
        c_r: base.c_r * pert(&mut rng),
        d_r: base.d_r * g,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn pacejka_zero_and_odd() {
        assert_eq!(pacejka_force(0.0, 2.0, 1.2, 0.19), 0.0);
        for s in [-2.0, -0.5, 0.1, 1.0, 3.0] {
            assert_relative_eq!(
                pacejka_force(-s, 2.0, 1.2, 0.19),
                -pacejka_force(s, 2.0, 1.2, 0.19),
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn pacejka_unit_coefficients() {
        assert_relative_eq!(
            pacejka_force(1.0, 1.0, 1.0, 1.0),
            std::f64::consts::FRAC_PI_4.sin(),
            epsilon = 1e-12
        );
        assert_relative_eq!(pacejka_force(1.0, 1.0, 1.0, 1.0), 0.70711, epsilon = 1e-5);
    }

    #[test]
    fn pacejka_bounded_and_limit() {
        let (b, c, d) = (3.38, 1.26, 0.173);
        for i in -100..=100 {
            let s = i as f64 * 0.2;
            assert!(pacejka_force(s, b, c, d).abs() <= d);
        }
        let s_inf = 1e6 / b;
        let lim = d * (c * std::f64::consts::FRAC_PI_2).sin();
        assert!((pacejka_force(s_inf, b, c, d) - lim).abs() <= 1e-6);
        assert!((pacejka_force(-s_inf, b, c, d) + lim).abs() <= 1e-6);
    }

    fn state(v_x: f64, v_y: f64, omega: f64) -> CarState {
        CarState {
            x: 0.0,
            y: 0.0,
            psi: 0.0,
            v_x,
            v_y,
            omega,
        }
    }

    #[test]
    fn slip_straight_driving() {
        let p = CarParams::default();
        let (sf, sr) = slip_angles(&state(1.0, 0.0, 0.0), 0.0, &p);
        assert_eq!(sf, 0.0);
        assert_eq!(sr, 0.0);
    }

    #[test]
    fn slip_pure_steer() {
        let p = CarParams::default();
        let (sf, sr) = slip_angles(&state(1.0, 0.0, 0.0), 0.1, &p);
        assert_relative_eq!(sf, -0.1, epsilon = 1e-15);
        assert_eq!(sr, 0.0);
    }

    #[test]
    fn slip_sign_under_yaw() {
        let p = CarParams::default();
        let (sf, sr) = slip_angles(&state(1.0, 0.0, 1.0), 0.0, &p);
        assert!(sf > 0.0);
        assert!(sr < 0.0);
    }

    #[test]
    fn straight_line_equilibrium() {
        let car = CarParams::default();
        let tires = PacejkaParams::default();
        let s0 = state(1.0, 0.0, 0.0);
        let s1 = car_step(&s0, (0.0, 0.0), &car, &tires, (0.0, 0.0));
        assert_eq!(s1.y, 0.0);
        assert_eq!(s1.psi, 0.0);
        assert_eq!(s1.v_y, 0.0);
        assert!(s1.x > 0.0);
    }

    #[test]
    fn rk4_close_to_fine_euler() {
        let car = CarParams::default();
        let tires = PacejkaParams::default();
        let s0 = state(1.5, 0.05, 1.0);
        let rk4 = car_step(&s0, (0.3, 0.2), &car, &tires, (0.0, 0.0));
        let fine = car_step_euler(&s0, (0.3, 0.2), &car, &tires, car.t_s, 2000);
        for (a, b) in [
            (rk4.x, fine.x),
            (rk4.y, fine.y),
            (rk4.psi, fine.psi),
            (rk4.v_x, fine.v_x),
            (rk4.v_y, fine.v_y),
            (rk4.omega, fine.omega),
        ] {
            assert!((a - b).abs() <= 1e-3 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn rk4_order_convergence() {
        let car = CarParams::default();
        let tires = PacejkaParams::default();
        let s0 = state(1.5, 0.02, 0.5);
        let u = (0.2, 0.15);
        let reference = car_step_dt(&s0, u, &car, &tires, (0.0, 0.0), car.t_s, 256);
        let coarse = car_step_dt(&s0, u, &car, &tires, (0.0, 0.0), car.t_s, 1);
        let half = car_step_dt(&s0, u, &car, &tires, (0.0, 0.0), car.t_s, 2);
        let err = |s: &CarState| {
            ((s.x - reference.x).powi(2)
                + (s.y - reference.y).powi(2)
                + (s.psi - reference.psi).powi(2)
                + (s.v_x - reference.v_x).powi(2)
                + (s.v_y - reference.v_y).powi(2)
                + (s.omega - reference.omega).powi(2))
            .sqrt()
        };
        let ratio = err(&coarse) / err(&half).max(1e-300);
        // Fourth order: halving the step shrinks the error ~16x.
        assert!(ratio > 8.0, "ratio {ratio}");
    }

    #[test]
    fn left_right_mirror_symmetry() {
        let car = CarParams::default();
        let tires = PacejkaParams::default();
        let s0 = state(1.2, 0.03, 0.8);
        let a = car_step(&s0, (0.2, 0.15), &car, &tires, (0.0, 0.0));
        let mut mirrored = s0;
        mirrored.v_y = -s0.v_y;
        mirrored.omega = -s0.omega;
        let b = car_step(&mirrored, (0.2, -0.15), &car, &tires, (0.0, 0.0));
        assert_relative_eq!(b.v_y, -a.v_y, epsilon = 1e-12);
        assert_relative_eq!(b.omega, -a.omega, epsilon = 1e-12);
        assert_relative_eq!(b.v_x, a.v_x, epsilon = 1e-12);
    }

    #[test]
    fn slip_damps_out() {
        // A lateral perturbation at constant speed must decay: straight
        // driving is a stable equilibrium of the tire model.
        let car = CarParams::default();
        let tires = PacejkaParams::default();
        let mut s = state(1.0, 0.05, 0.0);
        for _ in 0..50 {
            s = car_step(&s, (0.1, 0.0), &car, &tires, (0.0, 0.0));
        }
        assert!(s.v_y.abs() < 0.01, "v_y {}", s.v_y);
    }

    #[test]
    fn task_tires_deterministic_and_spread() {
        let base = PacejkaParams::default();
        let a = make_task_tires(&base, 3, 7, 42);
        let b = make_task_tires(&base, 3, 7, 42);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());

        let single = make_task_tires(&base, 0, 1, 42);
        assert_relative_eq!(single.d_f, base.d_f * 0.6, epsilon = 1e-12);

        let lo = make_task_tires(&base, 0, 7, 42);
        let hi = make_task_tires(&base, 6, 7, 42);
        assert_relative_eq!(hi.d_f / lo.d_f, 2.0, epsilon = 1e-12);
        assert_relative_eq!(hi.d_r / lo.d_r, 2.0, epsilon = 1e-12);
        for t in 0..7 {
            let p = make_task_tires(&base, t, 7, 42);
            assert!((p.b_f / base.b_f - 1.0).abs() <= 0.1);
            assert!((p.c_r / base.c_r - 1.0).abs() <= 0.1);
        }
    }
}
