//! Receding-horizon simulation drivers with online weight adaptation,
//! for the mountain-car benchmark and the race car.

use std::io::Write as _;
use std::path::Path;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::blr::{blr_update_recursive, sgd_mean_update, LinearPosterior, SgdMode};
use crate::envs::{
    car_step, mountain_car_step, CarParams, CarState, MountainCarParams, PacejkaParams, Track,
};
use crate::error::{Error, Result};
use crate::features::features;
use crate::mpc::adaptive::ResidualModel;
use crate::mpc::mpcc::{
    build_mpcc_ocp, mpcc_initial_state, MpccConfig, TireModel, IDX_S, MPCC_STATE_DIM,
};
use crate::mpc::solver::{solve_ocp, Ocp};

/// Online update rule for the residual weight posterior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Adapter {
    /// Weights frozen at their initial values.
    None,
    /// Exact recursive Bayesian update of mean and covariance.
    Recursive,
    /// Stochastic mean-only update; covariance stays at the prior.
    SgdMean { eta: f64, mode: SgdMode },
}

pub fn apply_adapter(
    post: &mut LinearPosterior,
    phi: &DVector<f64>,
    y: f64,
    noise_var: f64,
    adapter: &Adapter,
) {
    match adapter {
        Adapter::None => {}
        Adapter::Recursive => *post = blr_update_recursive(post, phi, y, noise_var),
        Adapter::SgdMean { eta, mode } => {
            post.mu = sgd_mean_update(&post.mu, phi, y, *eta, noise_var, *mode);
        }
    }
}

#[derive(Debug, Clone)]
pub struct LogStep {
    pub t: usize,
    pub state: Vec<f64>,
    pub input: Vec<f64>,
    /// Residual measurements consumed by the adapter this step.
    pub y: Vec<f64>,
    /// Model predictions of `y` before the update (one-step errors come
    /// from `y - pred`).
    pub pred: Vec<f64>,
    /// Posterior means after the update, concatenated across outputs.
    pub mu: Vec<f64>,
    pub cost: f64,
    pub iters: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrajectoryLog {
    pub steps: Vec<LogStep>,
    /// First step index at which the episode goal was met, if any.
    pub goal_step: Option<usize>,
    /// Continuous centerline progress per step (car runs only).
    pub progress: Vec<f64>,
    pub laps_completed: usize,
    pub aborted: Option<String>,
}

impl TrajectoryLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::EmptyLog);
        }
        let mut f = std::fs::File::create(path)?;
        let first = &self.steps[0];
        let mut header: Vec<String> = vec!["t".into()];
        for i in 0..first.state.len() {
            header.push(format!("x{i}"));
        }
        for i in 0..first.input.len() {
            header.push(format!("u{i}"));
        }
        for i in 0..first.y.len() {
            header.push(format!("y{i}"));
        }
        for i in 0..first.pred.len() {
            header.push(format!("pred{i}"));
        }
        for i in 0..first.mu.len() {
            header.push(format!("mu{i}"));
        }
        header.push("cost".into());
        header.push("iters".into());
        writeln!(f, "{}", header.join(","))?;
        for s in &self.steps {
            let mut row: Vec<String> = vec![s.t.to_string()];
            row.extend(s.state.iter().map(|v| v.to_string()));
            row.extend(s.input.iter().map(|v| v.to_string()));
            row.extend(s.y.iter().map(|v| v.to_string()));
            row.extend(s.pred.iter().map(|v| v.to_string()));
            row.extend(s.mu.iter().map(|v| v.to_string()));
            row.push(s.cost.to_string());
            row.push(s.iters.to_string());
            writeln!(f, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MountainCarRunConfig {
    pub horizon: usize,
    pub max_iters: usize,
    pub max_steps: usize,
    pub goal: f64,
    pub start: (f64, f64),
    pub control_weight: f64,
}

impl Default for MountainCarRunConfig {
    fn default() -> Self {
        Self {
            horizon: 25,
            max_iters: 30,
            max_steps: 100,
            goal: 0.6,
            start: (-0.5, 0.0),
            control_weight: 0.1,
        }
    }
}

fn mountain_car_ocp<'a>(
    model: &'a ResidualModel,
    plant: &'a MountainCarParams,
    cfg: &'a MountainCarRunConfig,
) -> Ocp<'a> {
    let t_s = plant.t_s;
    let theta2 = plant.theta2;
    let half = cfg.horizon / 2;
    Ocp {
        horizon: cfg.horizon,
        state_dim: 2,
        input_dim: 1,
        dynamics: Box::new(move |x, u, _, out| {
            out[0] = x[0] + t_s * x[1];
            out[1] = x[1] + t_s * u[0] * theta2 + model.mean(x, u);
        }),
        stage_cost: Box::new(move |x, u, k| {
            let mut c = cfg.control_weight * u[0] * u[0];
            // Position cost only over the terminal half of the horizon, so
            // the solver is free to swing backwards early. One-sided: only
            // shortfall below the goal is penalised, otherwise a symmetric
            // quadratic makes the controller brake to hover just under the
            // goal instead of crossing it.
            if k >= half {
                let short = (cfg.goal - x[0]).max(0.0);
                c += short * short;
            }
            c
        }),
        terminal_cost: Box::new(move |x| {
            let short = (cfg.goal - x[0]).max(0.0);
            short * short
        }),
        input_lower: vec![-1.0],
        input_upper: vec![1.0],
        max_iters: cfg.max_iters,
    }
}

/// Swing-up friendly initial guess: reverse for the first half of the
/// horizon, full forward after.
fn swing_warm_start(horizon: usize) -> Vec<f64> {
    (0..horizon)
        .map(|k| if k < horizon / 2 { -1.0 } else { 1.0 })
        .collect()
}

/// Run the adaptive controller against the mountain-car plant. The model's
/// posterior is updated in place; with `Adapter::None` and a posterior mean
/// matching the true slope parameter this reproduces ground-truth MPC.
pub fn run_closed_loop_mountain_car(
    plant: &MountainCarParams,
    model: &mut ResidualModel,
    adapter: &Adapter,
    cfg: &MountainCarRunConfig,
    seed: u64,
) -> Result<TrajectoryLog> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, plant.process_noise_std.max(f64::MIN_POSITIVE)).unwrap();
    let noise_on = plant.process_noise_std > 0.0;
    let noise_var = model.basis.noise_var();
    let mut log = TrajectoryLog::default();
    let mut state = [cfg.start.0, cfg.start.1];
    let mut warm = swing_warm_start(cfg.horizon);

    for t in 0..cfg.max_steps {
        let (cost, iters, u0) = {
            let ocp = mountain_car_ocp(model, plant, cfg);
            let sol = solve_ocp(&ocp, &state, Some(&warm))?;
            warm = sol.inputs.clone();
            warm.remove(0);
            warm.push(*warm.last().unwrap());
            (sol.cost, sol.iters, sol.inputs[0])
        };
        let w = if noise_on { noise.sample(&mut rng) } else { 0.0 };
        let (pn, vn) = mountain_car_step((state[0], state[1]), u0, plant, w);
        // Residual observation: next velocity minus the known part of the
        // model; contains the slope term plus process noise.
        let y = vn - state[1] - plant.t_s * u0 * plant.theta2;
        let phi = features(&model.basis, &model.feature_input(&state, &[u0]))?;
        let pred = phi.dot(&model.posterior.mu);
        apply_adapter(&mut model.posterior, &phi, y, noise_var, adapter);
        log.steps.push(LogStep {
            t,
            state: state.to_vec(),
            input: vec![u0],
            y: vec![y],
            pred: vec![pred],
            mu: model.posterior.mu.iter().copied().collect(),
            cost,
            iters,
        });
        state = [pn, vn];
        if pn >= cfg.goal && log.goal_step.is_none() {
            log.goal_step = Some(t + 1);
            break;
        }
    }
    Ok(log)
}

#[derive(Debug, Clone)]
pub struct CarRunConfig {
    pub max_steps: usize,
    pub target_laps: usize,
    pub start_s: f64,
    /// Process noise std on `(v_y, omega)` per step.
    pub process_noise_std: (f64, f64),
    /// Std of the normalized tire-force measurement noise.
    pub meas_noise_std: f64,
    pub mpcc: MpccConfig,
}

impl Default for CarRunConfig {
    fn default() -> Self {
        Self {
            max_steps: 4000,
            target_laps: 1,
            start_s: 0.0,
            process_noise_std: (1e-4, 1e-3),
            meas_noise_std: 0.02,
            mpcc: MpccConfig::default(),
        }
    }
}

/// Run the contouring controller around the track. `tires_at(lap, s)` gives
/// the plant tires, enabling mid-run grip changes; the tire model's
/// posteriors adapt in place from normalized force observations. Passing
/// `control_force` overrides the prediction model inside the solver (for
/// ground-truth reference controllers) while observations and adaptation
/// still flow through `model`.
pub fn run_closed_loop_car(
    track: &Track,
    car: &CarParams,
    tires_at: &dyn Fn(usize, f64) -> PacejkaParams,
    model: &mut TireModel,
    adapter: &Adapter,
    cfg: &CarRunConfig,
    seed: u64,
    control_force: Option<&dyn Fn(f64, f64) -> (f64, f64)>,
) -> Result<TrajectoryLog> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_vy = Normal::new(0.0, cfg.process_noise_std.0.max(f64::MIN_POSITIVE)).unwrap();
    let n_om = Normal::new(0.0, cfg.process_noise_std.1.max(f64::MIN_POSITIVE)).unwrap();
    let n_meas = Normal::new(0.0, cfg.meas_noise_std.max(f64::MIN_POSITIVE)).unwrap();
    let noise_var = model.basis.noise_var();
    let total = track.total_length();

    let start = track.position(cfg.start_s);
    let mut state = CarState::at_rest(start.x, start.y, track.tangent_angle(cfg.start_s));
    let mut s_proj = cfg.start_s;
    let mut s_cont = 0.0;
    let mut u_prev = (0.0, 0.0);
    let mut warm: Option<Vec<f64>> = None;
    let mut log = TrajectoryLog::default();

    for t in 0..cfg.max_steps {
        let lap = (s_cont / total).floor().max(0.0) as usize;
        let tires = tires_at(lap, s_proj);
        let (cost, iters, u0, u1) = {
            // Tabulate the learned forces once per control step; the solver
            // then only does piecewise-linear lookups.
            let table = model.tabulate(-0.8, 0.8, 257);
            let model_force = |s_f: f64, s_r: f64| table.forces(s_f, s_r);
            let force: &dyn Fn(f64, f64) -> (f64, f64) = match control_force {
                Some(f) => f,
                None => &model_force,
            };
            let ocp = build_mpcc_ocp(track, car, force, &cfg.mpcc);
            let x0 = mpcc_initial_state(&state, s_proj, u_prev);
            let default_warm: Vec<f64> = (0..cfg.mpcc.horizon).flat_map(|_| [0.3, 0.0]).collect();
            let sol = solve_ocp(&ocp, &x0, Some(warm.as_deref().unwrap_or(&default_warm)))?;
            let mut w = sol.inputs.clone();
            w.drain(0..2);
            let tail = [w[w.len() - 2], w[w.len() - 1]];
            w.extend_from_slice(&tail);
            warm = Some(w);
            (sol.cost, sol.iters, sol.inputs[0], sol.inputs[1])
        };

        let (s_f, s_r) = crate::envs::slip_angles(&state, u1.clamp(-car.steer_max, car.steer_max), car);
        let (ff_true, fr_true) = crate::envs::pacejka_slip_forces(s_f, s_r, &tires);
        let y_f = ff_true / model.scale_f + n_meas.sample(&mut rng);
        let y_r = fr_true / model.scale_r + n_meas.sample(&mut rng);
        let phi_f = features(&model.basis, &[TireModel::feature_arg(s_f)])?;
        let phi_r = features(&model.basis, &[TireModel::feature_arg(s_r)])?;
        let pred_f = phi_f.dot(&model.post_f.mu);
        let pred_r = phi_r.dot(&model.post_r.mu);
        apply_adapter(&mut model.post_f, &phi_f, y_f, noise_var, adapter);
        apply_adapter(&mut model.post_r, &phi_r, y_r, noise_var, adapter);

        let next = car_step(
            &state,
            (u0, u1),
            car,
            &tires,
            (n_vy.sample(&mut rng), n_om.sample(&mut rng)),
        );

        let mut ext = [0.0; MPCC_STATE_DIM - 2];
        ext[..6].copy_from_slice(&[state.x, state.y, state.psi, state.v_x, state.v_y, state.omega]);
        ext[IDX_S] = s_proj;
        let mut mu: Vec<f64> = model.post_f.mu.iter().copied().collect();
        mu.extend(model.post_r.mu.iter());
        log.steps.push(LogStep {
            t,
            state: ext.to_vec(),
            input: vec![u0, u1],
            y: vec![y_f, y_r],
            pred: vec![pred_f, pred_r],
            mu,
            cost,
            iters,
        });
        log.progress.push(s_cont);

        state = next;
        u_prev = (
            u0.clamp(-car.throttle_max, car.throttle_max),
            u1.clamp(-car.steer_max, car.steer_max),
        );
        match track.project(state.x, state.y, s_proj) {
            Ok((s_new, _)) => {
                let mut ds = s_new - s_proj;
                // Wrapped increment; the car never moves half a lap per step.
                if ds > total / 2.0 {
                    ds -= total;
                } else if ds < -total / 2.0 {
                    ds += total;
                }
                s_cont += ds;
                s_proj = s_new;
            }
            Err(e) => {
                log.aborted = Some(format!("projection failed at step {t}: {e}"));
                break;
            }
        }
        log.laps_completed = (s_cont / total).floor().max(0.0) as usize;
        if log.laps_completed >= cfg.target_laps {
            log.goal_step = Some(t + 1);
            break;
        }
    }
    Ok(log)
}
