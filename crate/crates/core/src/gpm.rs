//! Gradient projection method on the control trajectory.
//!
//! The input is piecewise constant on a uniform grid of `M` cells over the
//! horizon, integrated with one RK4 step per cell. The costate is the exact
//! discrete adjoint of that integrator, so the control gradient is the true
//! gradient of the discretized cost (up to the factor `1/h` that turns it into
//! a per-unit-time Hamiltonian gradient).

use std::time::Instant;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::ocp::{project_input, rk4_cost_step, Dynamics, OcpConfig, RK4_WEIGHTS};
use crate::shooting::{SolveResult, SolveStatus};

/// Iteration budget, step rule and tolerances.
#[derive(Debug, Clone, PartialEq)]
pub struct GpmSettings {
    pub max_iter: usize,
    /// Initial step length (scaled units).
    pub gamma0: f64,
    /// Candidate multipliers of the current step tried every iteration.
    pub step_factors: Vec<f64>,
    /// The iteration stops once the first-order decrease of a unit
    /// projected-gradient step falls below this fraction of the cost.
    pub cost_tol: f64,
    /// Projected-gradient norm below which the iteration stops.
    pub grad_tol: f64,
    /// Number of grid cells `M` over the horizon.
    pub grid: usize,
    /// Costate magnitude treated as blow-up.
    pub costate_limit: f64,
}

impl GpmSettings {
    /// Fully converging settings on the shooting grid of `config`.
    pub fn converged(config: &OcpConfig) -> Self {
        Self {
            max_iter: 2000,
            gamma0: 0.1,
            step_factors: vec![2.0, 1.0, 0.5, 0.25],
            cost_tol: 1e-12,
            grad_tol: 1e-7,
            grid: config.intervals * config.substeps,
            costate_limit: 1e12,
        }
    }

    /// Three warm-started gradient steps per sampling instant.
    pub fn fast(config: &OcpConfig) -> Self {
        Self {
            max_iter: 3,
            ..Self::converged(config)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if !(self.gamma0 > 0.0) {
            return bad("gpm step gamma0 must be positive");
        }
        if self.grid < 10 {
            return bad("gpm grid needs at least 10 cells");
        }
        if !(self.cost_tol > 0.0 && self.grad_tol > 0.0) {
            return bad("gpm tolerances must be positive");
        }
        if self.step_factors.is_empty() || !self.step_factors.iter().all(|&f| f > 0.0) {
            return bad("gpm step factors must be positive");
        }
        Ok(())
    }

    pub fn cell(&self, config: &OcpConfig) -> f64 {
        config.horizon / self.grid as f64
    }
}

/// States on the grid plus the integrated cost.
#[derive(Debug, Clone)]
pub struct StateTrajectory {
    pub states: Vec<Vector3<f64>>,
    pub cost: f64,
    /// Cell length.
    pub h: f64,
}

/// Costate on the grid; `lambda[M] = 0`.
#[derive(Debug, Clone)]
pub struct CostateTrajectory {
    pub lambda: Vec<Vector3<f64>>,
}

impl CostateTrajectory {
    pub fn max_norm(&self) -> f64 {
        self.lambda.iter().map(|l| l.amax()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.lambda.iter().all(|l| l.iter().all(|v| v.is_finite()))
    }
}

/// RK4 rollout with one step per control cell. Errors carry the cell index.
pub fn forward_integrate<M: Dynamics>(model: &M, config: &OcpConfig, x_hat: &Vector3<f64>, controls: &[f64]) -> Result<StateTrajectory, (usize, Error)> {
    let h = config.horizon / controls.len() as f64;
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(*x_hat);
    let mut cost = 0.0;
    for (j, &u) in controls.iter().enumerate() {
        let (next, c) = rk4_cost_step(model, config, &states[j], u, h).map_err(|e| (j, e))?;
        states.push(next);
        cost += c;
    }
    Ok(StateTrajectory { states, cost, h })
}

// Reverse pass through one RK4 step. Returns (lambda_j, dJ/du_j).
fn adjoint_step<M: Dynamics>(model: &M, config: &OcpConfig, x: &Vector3<f64>, u: f64, h: f64, lam_next: &Vector3<f64>) -> Result<(Vector3<f64>, f64)> {
    let offsets = [0.0, 0.5, 0.5, 1.0];
    let q = Vector3::from(config.q);
    let mut lins = Vec::with_capacity(4);
    let mut k_prev = Vector3::zeros();
    for c in offsets {
        let lin = model.linearize(&(x + k_prev * (c * h)), u)?;
        let gx = lin.c_y.transpose() * lin.y.component_mul(&q) * 2.0;
        k_prev = lin.f;
        lins.push((lin, gx));
    }
    let w = RK4_WEIGHTS;
    let mut bar_k = [Vector3::zeros(); 4];
    let mut bar_x = [Vector3::zeros(); 4];
    for i in (0..4).rev() {
        let mut bk = lam_next * (w[i] * h);
        if i < 3 {
            bk += bar_x[i + 1] * (offsets[i + 1] * h);
        }
        bar_k[i] = bk;
        bar_x[i] = lins[i].0.a.transpose() * bk + lins[i].1 * (w[i] * h);
    }
    let lam = lam_next + bar_x[0] + bar_x[1] + bar_x[2] + bar_x[3];
    let mut du = 0.0;
    for i in 0..4 {
        du += lins[i].0.b.dot(&bar_k[i]) + w[i] * h * 2.0 * config.r * u;
    }
    Ok((lam, du))
}

fn sweep<M: Dynamics>(model: &M, config: &OcpConfig, traj: &StateTrajectory, controls: &[f64]) -> Result<(CostateTrajectory, Vec<f64>), (usize, Error)> {
    let m = controls.len();
    let mut lambda = vec![Vector3::zeros(); m + 1];
    let mut grad = vec![0.0; m];
    for j in (0..m).rev() {
        let (lam, du) = adjoint_step(model, config, &traj.states[j], controls[j], traj.h, &lambda[j + 1]).map_err(|e| (j, e))?;
        lambda[j] = lam;
        grad[j] = du / traj.h;
    }
    Ok((CostateTrajectory { lambda }, grad))
}

/// Backward costate recursion on the stored grid.
pub fn backward_costate<M: Dynamics>(model: &M, config: &OcpConfig, traj: &StateTrajectory, controls: &[f64]) -> Result<CostateTrajectory, (usize, Error)> {
    sweep(model, config, traj, controls).map(|(c, _)| c)
}

/// Hamiltonian gradient `dH/du` per cell, i.e. the derivative of the
/// discretized cost with respect to cell `j`'s input divided by the cell
/// length.
pub fn control_gradient<M: Dynamics>(model: &M, config: &OcpConfig, traj: &StateTrajectory, costate: &CostateTrajectory, controls: &[f64]) -> Result<Vec<f64>, (usize, Error)> {
    (0..controls.len())
        .map(|j| {
            adjoint_step(model, config, &traj.states[j], controls[j], traj.h, &costate.lambda[j + 1])
                .map(|(_, du)| du / traj.h)
                .map_err(|e| (j, e))
        })
        .collect()
}

fn projected_gradient_norm(controls: &[f64], grad: &[f64], config: &OcpConfig) -> f64 {
    controls
        .iter()
        .zip(grad)
        .map(|(&u, &g)| (u - project_input(u - g, config)).abs())
        .fold(0.0, f64::max)
}

/// First-order cost decrease of a unit projected-gradient step. Depends on
/// the iterate only, so a converged iterate stays converged.
fn predicted_decrease(controls: &[f64], grad: &[f64], config: &OcpConfig, h: f64) -> f64 {
    h * controls
        .iter()
        .zip(grad)
        .map(|(&u, &g)| g * (u - project_input(u - g, config)))
        .sum::<f64>()
}

/// Zero input if its rollout stays in the model domain, otherwise the
/// cheapest admissible constant input on a uniform scan of the box.
fn cold_start<M: Dynamics>(model: &M, config: &OcpConfig, x_hat: &Vector3<f64>, m: usize) -> Vec<f64> {
    let zero = vec![project_input(0.0, config); m];
    if forward_integrate(model, config, x_hat, &zero).is_ok() {
        return zero;
    }
    const LEVELS: usize = 40;
    let mut best = (f64::INFINITY, zero);
    for i in 0..=LEVELS {
        let level = config.u_lower + (config.u_upper - config.u_lower) * i as f64 / LEVELS as f64;
        let u = vec![level; m];
        if let Ok(t) = forward_integrate(model, config, x_hat, &u) {
            if t.cost < best.0 {
                best = (t.cost, u);
            }
        }
    }
    best.1
}

/// Step reductions by 8 tried before a line-search stall is declared.
const RETRIES: usize = 6;

/// Projected gradient descent with the adaptive step rule.
///
/// `warm` must have `settings.grid` entries to be used; otherwise the
/// iteration starts from a constant input (see `cold_start`).
pub fn gpm_solve<M: Dynamics>(model: &M, config: &OcpConfig, x_hat: &Vector3<f64>, warm: Option<&[f64]>, settings: &GpmSettings) -> SolveResult {
    let start = Instant::now();
    let m = settings.grid;
    let mut u: Vec<f64> = match warm {
        Some(w) if w.len() == m => w.iter().map(|&v| project_input(v, config)).collect(),
        _ => cold_start(model, config, x_hat, m),
    };
    let finish = |u: Vec<f64>, traj: Option<StateTrajectory>, kkt: f64, iterations: usize, status: SolveStatus, failed: Option<usize>| {
        let (states, objective) = match traj {
            Some(t) => (t.states, t.cost),
            None => (Vec::new(), f64::NAN),
        };
        SolveResult {
            controls: u,
            states,
            objective,
            kkt_residual: kkt,
            max_defect: 0.0,
            iterations,
            wall_time: start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE),
            status,
            failed_node: failed,
        }
    };

    let mut traj = match forward_integrate(model, config, x_hat, &u) {
        Ok(t) => t,
        Err((j, _)) => return finish(u, None, f64::INFINITY, 0, SolveStatus::DomainError, Some(j)),
    };
    let mut gamma = settings.gamma0;
    let mut kkt = f64::INFINITY;
    for iter in 1..=settings.max_iter {
        let (costate, grad) = match sweep(model, config, &traj, &u) {
            Ok(r) => r,
            Err((j, _)) => return finish(u, Some(traj), kkt, iter, SolveStatus::DomainError, Some(j)),
        };
        if !costate.is_finite() || costate.max_norm() > settings.costate_limit {
            return finish(u, Some(traj), kkt, iter, SolveStatus::CostateDivergence, None);
        }
        kkt = projected_gradient_norm(&u, &grad, config);
        if kkt < settings.grad_tol || predicted_decrease(&u, &grad, config, traj.h) < settings.cost_tol * traj.cost.abs() {
            return finish(u, Some(traj), kkt, iter, SolveStatus::Converged, None);
        }
        let mut best: Option<(f64, Vec<f64>, StateTrajectory)> = None;
        // when no candidate descends, shrink the step and try again
        for _ in 0..=RETRIES {
            for &factor in &settings.step_factors {
                let step = gamma * factor;
                let trial: Vec<f64> = u.iter().zip(&grad).map(|(&v, &g)| project_input(v - step * g, config)).collect();
                if let Ok(t) = forward_integrate(model, config, x_hat, &trial) {
                    if t.cost.is_finite() && best.as_ref().map_or(true, |b| t.cost < b.2.cost) {
                        best = Some((step, trial, t));
                    }
                }
            }
            if best.as_ref().is_some_and(|b| b.2.cost < traj.cost) {
                break;
            }
            best = None;
            gamma *= 0.125;
        }
        match best {
            Some((step, trial, t)) if t.cost < traj.cost => {
                gamma = step;
                u = trial;
                traj = t;
            }
            _ => return finish(u, Some(traj), kkt, iter, SolveStatus::LineSearchStall, None),
        }
    }
    finish(u, Some(traj), kkt, settings.max_iter, SolveStatus::MaxIter, None)
}

/// Receding-horizon wrapper that shifts the previous input trajectory.
#[derive(Debug, Clone)]
pub struct GpmController {
    pub settings: GpmSettings,
    warm: Option<Vec<f64>>,
}

impl GpmController {
    pub fn new(settings: GpmSettings) -> Self {
        Self { settings, warm: None }
    }

    pub fn reset(&mut self) {
        self.warm = None;
    }

    /// Solves at `x_hat` and stores the solution shifted by one sampling
    /// period `delta` as the next warm start.
    pub fn step<M: Dynamics>(&mut self, model: &M, config: &OcpConfig, x_hat: &Vector3<f64>, delta: f64) -> SolveResult {
        let res = gpm_solve(model, config, x_hat, self.warm.as_deref(), &self.settings);
        let h = self.settings.cell(config);
        let shift = ((delta / h).round() as usize).max(1).min(res.controls.len());
        let mut next: Vec<f64> = res.controls[shift..].to_vec();
        let last = *res.controls.last().unwrap_or(&0.0);
        next.resize(res.controls.len(), last);
        self.warm = Some(next);
        res
    }
}
