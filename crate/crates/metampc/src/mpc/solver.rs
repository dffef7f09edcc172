//! Single-shooting finite-horizon solver: forward-difference gradients,
//! limited-memory quasi-Newton direction, backtracking line search and
//! box projection on the inputs.

use crate::error::{Error, Result};

/// Finite-horizon optimal control problem over a discrete dynamics map.
pub struct Ocp<'a> {
    pub horizon: usize,
    pub state_dim: usize,
    pub input_dim: usize,
    /// (state, input, stage index) -> next state, written into the output slice.
    pub dynamics: Box<dyn Fn(&[f64], &[f64], usize, &mut [f64]) + 'a>,
    /// Time-indexed stage cost l_k(x_k, u_k).
    pub stage_cost: Box<dyn Fn(&[f64], &[f64], usize) -> f64 + 'a>,
    pub terminal_cost: Box<dyn Fn(&[f64]) -> f64 + 'a>,
    pub input_lower: Vec<f64>,
    pub input_upper: Vec<f64>,
    /// Iteration budget for the descent loop.
    pub max_iters: usize,
}

pub struct SolveResult {
    /// Flattened input sequence, row k at `[k*m .. (k+1)*m]`.
    pub inputs: Vec<f64>,
    /// Predicted states including x0, `(N+1) * n` flattened.
    pub states: Vec<f64>,
    pub cost: f64,
    pub iters: usize,
}

struct Workspace {
    n: usize,
    m: usize,
    horizon: usize,
    states: Vec<f64>,
}

impl Workspace {
    fn rollout_cost(&mut self, ocp: &Ocp, x0: &[f64], u: &[f64]) -> f64 {
        self.states[..self.n].copy_from_slice(x0);
        let mut cost = 0.0;
        for k in 0..self.horizon {
            let (head, tail) = self.states.split_at_mut((k + 1) * self.n);
            let xk = &head[k * self.n..];
            let uk = &u[k * self.m..(k + 1) * self.m];
            cost += (ocp.stage_cost)(xk, uk, k);
            (ocp.dynamics)(xk, uk, k, &mut tail[..self.n]);
        }
        cost + (ocp.terminal_cost)(&self.states[self.horizon * self.n..])
    }

    /// Cost after perturbing one input coordinate, re-rolling only the
    /// suffix from that stage. Requires `states` to hold the unperturbed
    /// trajectory and `prefix_costs[k]` the cost of stages < k.
    fn suffix_cost(
        &self,
        ocp: &Ocp,
        u: &[f64],
        stage: usize,
        coord: usize,
        delta: f64,
        prefix_costs: &[f64],
        scratch: &mut [f64],
    ) -> f64 {
        let n = self.n;
        let m = self.m;
        let mut cost = prefix_costs[stage];
        let (xa, xb) = scratch.split_at_mut(n);
        xa.copy_from_slice(&self.states[stage * n..(stage + 1) * n]);
        let mut cur = xa;
        let mut next = xb;
        let mut ubuf = vec![0.0; m];
        for k in stage..self.horizon {
            let uk = &u[k * m..(k + 1) * m];
            if k == stage {
                ubuf.copy_from_slice(uk);
                ubuf[coord] += delta;
            } else {
                ubuf.copy_from_slice(uk);
            }
            cost += (ocp.stage_cost)(cur, &ubuf, k);
            (ocp.dynamics)(cur, &ubuf, k, next);
            std::mem::swap(&mut cur, &mut next);
        }
        cost + (ocp.terminal_cost)(cur)
    }
}

fn project(u: &mut [f64], lo: &[f64], hi: &[f64], m: usize) {
    for (j, v) in u.iter_mut().enumerate() {
        let c = j % m;
        *v = v.clamp(lo[c], hi[c]);
    }
}

/// Solve the OCP from `x0`, optionally warm-started. The line search only
/// accepts non-worsening steps, so the returned cost never exceeds the cost
/// of a feasible warm start.
pub fn solve_ocp(ocp: &Ocp, x0: &[f64], warm: Option<&[f64]>) -> Result<SolveResult> {
    let n = ocp.state_dim;
    let m = ocp.input_dim;
    let horizon = ocp.horizon;
    assert!(horizon >= 1);
    assert_eq!(x0.len(), n);
    let dim = horizon * m;

    let mut ws = Workspace {
        n,
        m,
        horizon,
        states: vec![0.0; (horizon + 1) * n],
    };

    let mut u = match warm {
        Some(w) => {
            assert_eq!(w.len(), dim);
            let mut u = w.to_vec();
            project(&mut u, &ocp.input_lower, &ocp.input_upper, m);
            u
        }
        None => vec![0.0; dim],
    };
    let mut cost = ws.rollout_cost(ocp, x0, &u);
    if !cost.is_finite() {
        // Contract: fail only if the zero-input cost is non-finite.
        u = vec![0.0; dim];
        project(&mut u, &ocp.input_lower, &ocp.input_upper, m);
        cost = ws.rollout_cost(ocp, x0, &u);
        if !cost.is_finite() {
            return Err(Error::SolveFailed);
        }
    }

    // Limited-memory quasi-Newton pairs from accepted steps.
    let mem = 8;
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut grad = vec![0.0; dim];
    let mut grad_prev = vec![0.0; dim];
    let mut prefix_costs = vec![0.0; horizon + 1];
    let mut scratch = vec![0.0; 2 * n];
    let mut iters_done = 0;

    // Central differences on suffix rollouts: perturbing input k only
    // changes stages >= k, so prefixes of the cached trajectory are reused.
    let compute_grad = |ws: &mut Workspace,
                        u: &[f64],
                        prefix_costs: &mut [f64],
                        scratch: &mut [f64],
                        grad: &mut [f64]| {
        prefix_costs[0] = 0.0;
        for k in 0..horizon {
            let xk = &ws.states[k * n..(k + 1) * n];
            let uk = &u[k * m..(k + 1) * m];
            prefix_costs[k + 1] = prefix_costs[k] + (ocp.stage_cost)(xk, uk, k);
        }
        for k in 0..horizon {
            for c in 0..m {
                let j = k * m + c;
                // Central differences tolerate a larger step than one-sided;
                // eps^(1/3)-scale keeps the rounding floor below the
                // truncation error.
                let h = 1e-5 * u[j].abs().max(1.0);
                let fp = ws.suffix_cost(ocp, u, k, c, h, prefix_costs, scratch);
                let fm = ws.suffix_cost(ocp, u, k, c, -h, prefix_costs, scratch);
                grad[j] = (fp - fm) / (2.0 * h);
            }
        }
    };

    for it in 0..ocp.max_iters {
        iters_done = it + 1;
        // Rollout to refresh the stored trajectory, then gradient.
        let c0 = ws.rollout_cost(ocp, x0, &u);
        debug_assert!((c0 - cost).abs() <= 1e-9 * cost.abs().max(1.0) || !cost.is_finite());
        let _ = c0;
        compute_grad(&mut ws, &u, &mut prefix_costs, &mut scratch, &mut grad);
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < 1e-10 {
            break;
        }

        // Two-loop recursion for the quasi-Newton direction.
        let mut dir = grad.clone();
        let pairs = s_hist.len();
        let mut alpha = vec![0.0; pairs];
        for i in (0..pairs).rev() {
            let rho = 1.0
                / s_hist[i]
                    .iter()
                    .zip(&y_hist[i])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            if !rho.is_finite() || rho <= 0.0 {
                continue;
            }
            alpha[i] = rho * s_hist[i].iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>();
            for (d, y) in dir.iter_mut().zip(&y_hist[i]) {
                *d -= alpha[i] * y;
            }
        }
        if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
            let sy = s.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
            let yy = y.iter().map(|v| v * v).sum::<f64>();
            if sy > 0.0 && yy > 0.0 {
                let scale = sy / yy;
                for d in dir.iter_mut() {
                    *d *= scale;
                }
            }
        }
        for i in 0..pairs {
            let rho = 1.0
                / s_hist[i]
                    .iter()
                    .zip(&y_hist[i])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            if !rho.is_finite() || rho <= 0.0 {
                continue;
            }
            let beta = rho * y_hist[i].iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>();
            for (d, s) in dir.iter_mut().zip(&s_hist[i]) {
                *d += (alpha[i] - beta) * s;
            }
        }
        // Descent direction is -dir; fall back to steepest descent when the
        // curvature model fails.
        let descent = grad.iter().zip(&dir).map(|(g, d)| g * d).sum::<f64>();
        if !descent.is_finite() || descent <= 0.0 {
            dir.copy_from_slice(&grad);
        }

        let mut accepted = false;
        // If the quasi-Newton direction stalls, retry the same iteration
        // with steepest descent (scaled to a unit-length first step) before
        // declaring convergence.
        'attempts: for attempt in 0..2 {
            if attempt == 1 {
                let scale = 1.0 / gnorm.max(1e-12);
                for (d, g) in dir.iter_mut().zip(&grad) {
                    *d = g * scale;
                }
                s_hist.clear();
                y_hist.clear();
            }
            let mut t = 1.0;
            for _ in 0..25 {
                let mut cand = u.clone();
                for j in 0..dim {
                    cand[j] -= t * dir[j];
                }
                project(&mut cand, &ocp.input_lower, &ocp.input_upper, m);
                let cand_cost = ws.rollout_cost(ocp, x0, &cand);
                if cand_cost.is_finite() && cand_cost < cost {
                    let mut s_vec = vec![0.0; dim];
                    for j in 0..dim {
                        s_vec[j] = cand[j] - u[j];
                    }
                    grad_prev.copy_from_slice(&grad);
                    u = cand;
                    cost = cand_cost;
                    // Refresh gradient lazily next iteration; store the pair then.
                    let _ = ws.rollout_cost(ocp, x0, &u);
                    compute_grad(&mut ws, &u, &mut prefix_costs, &mut scratch, &mut grad);
                    let mut y_vec = vec![0.0; dim];
                    for j in 0..dim {
                        y_vec[j] = grad[j] - grad_prev[j];
                    }
                    let sy = s_vec.iter().zip(&y_vec).map(|(a, b)| a * b).sum::<f64>();
                    if sy > 1e-14 {
                        s_hist.push(s_vec);
                        y_hist.push(y_vec);
                        if s_hist.len() > mem {
                            s_hist.remove(0);
                            y_hist.remove(0);
                        }
                    }
                    accepted = true;
                    break 'attempts;
                }
                t *= 0.5;
            }
        }
        if !accepted {
            break;
        }
    }

    let final_cost = ws.rollout_cost(ocp, x0, &u);
    Ok(SolveResult {
        inputs: u,
        states: ws.states.clone(),
        cost: final_cost,
        iters: iters_done,
    })
}
