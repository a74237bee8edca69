//! Direct multiple shooting with Gauss-Newton SQP.
//!
//! Node states `x_0 .. x_N` and piecewise-constant controls `u_0 .. u_{N-1}`
//! are the decision variables; `x_{k+1} = F(x_k, u_k)` is imposed through
//! continuity defects. Each SQP iteration linearizes the interval maps (exact
//! RK4 forward sensitivities), eliminates the state steps (condensing) and
//! solves a dense QP over the input steps with box bounds. The real-time
//! iteration performs exactly one such cycle per sampling instant.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::Error;
use crate::ocp::{interval_map, interval_sensitivity, Dynamics, IntervalSensitivity, OcpConfig};

/// Outcome classification shared by both solver families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIter,
    QpFailure,
    DomainError,
    /// No trial step reduced the cost or merit function.
    LineSearchStall,
    /// The costate left the finite range.
    CostateDivergence,
}

impl SolveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveStatus::Converged => "converged",
            SolveStatus::MaxIter => "max-iter",
            SolveStatus::QpFailure => "qp-failure",
            SolveStatus::DomainError => "domain-error",
            SolveStatus::LineSearchStall => "line-search-stall",
            SolveStatus::CostateDivergence => "costate-divergence",
        }
    }
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Result of one OCP solve (scaled quantities).
#[derive(Debug, Clone)]
pub struct SolveResult {
    pub controls: Vec<f64>,
    pub states: Vec<Vector3<f64>>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub max_defect: f64,
    pub iterations: usize,
    /// Wall time [s].
    pub wall_time: f64,
    pub status: SolveStatus,
    /// Failing shooting node for `DomainError`.
    pub failed_node: Option<usize>,
}

/// Multiple-shooting variables.
#[derive(Debug, Clone, PartialEq)]
pub struct ShootingIterate {
    pub states: Vec<Vector3<f64>>,
    pub controls: Vec<f64>,
}

impl ShootingIterate {
    pub fn intervals(&self) -> usize {
        self.controls.len()
    }

    /// Warm start for the next sampling instant: drop the first interval and
    /// repeat the last one.
    #[must_use]
    pub fn shifted(&self) -> Self {
        self.shifted_by(1.0)
    }

    /// Shift by `fraction` intervals. Nodes and inputs are interpolated
    /// linearly between neighbours; the last entry is repeated past the end.
    /// `shifted_by(1.0)` equals [`ShootingIterate::shifted`].
    #[must_use]
    pub fn shifted_by(&self, fraction: f64) -> Self {
        fn at<T>(v: &[T], pos: f64) -> T
        where
            T: Copy + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>,
        {
            let last = v.len() - 1;
            let i = pos.floor() as usize;
            if i >= last {
                return v[last];
            }
            let w = pos - i as f64;
            if w == 0.0 {
                v[i]
            } else {
                v[i] * (1.0 - w) + v[i + 1] * w
            }
        }
        if self.controls.is_empty() {
            return self.clone();
        }
        let fraction = fraction.max(0.0);
        Self {
            states: (0..self.states.len()).map(|k| at(&self.states, k as f64 + fraction)).collect(),
            controls: (0..self.controls.len()).map(|k| at(&self.controls, k as f64 + fraction)).collect(),
        }
    }

    /// Continuity defects `F(x_k, u_k) - x_{k+1}`.
    pub fn defects<M: Dynamics>(&self, model: &M, config: &OcpConfig) -> Result<Vec<Vector3<f64>>, (usize, Error)> {
        (0..self.intervals())
            .map(|k| {
                interval_map(model, config, &self.states[k], self.controls[k])
                    .map(|(x, _)| x - self.states[k + 1])
                    .map_err(|e| (k, e))
            })
            .collect()
    }
}

/// Builds the initial shooting iterate with `x_0 = x_hat`.
///
/// A warm start with matching interval count is copied; otherwise the nodes
/// come from a forward rollout with zero input. If that rollout leaves the
/// model's domain, the nodes are placed on the straight line from `x_hat` to
/// the origin instead.
pub fn transcribe<M: Dynamics>(model: &M, config: &OcpConfig, x_hat: &Vector3<f64>, warm: Option<&ShootingIterate>) -> ShootingIterate {
    let n = config.intervals;
    if let Some(w) = warm.filter(|w| w.intervals() == n && w.states.len() == n + 1) {
        let mut it = w.clone();
        it.states[0] = *x_hat;
        for u in &mut it.controls {
            *u = u.clamp(config.u_lower, config.u_upper);
        }
        return it;
    }
    let controls = vec![0.0f64.clamp(config.u_lower, config.u_upper); n];
    let mut states = Vec::with_capacity(n + 1);
    states.push(*x_hat);
    for k in 0..n {
        match interval_map(model, config, &states[k], controls[k]) {
            Ok((next, _)) => states.push(next),
            Err(_) => {
                states = (0..=n).map(|j| x_hat * (1.0 - j as f64 / n as f64)).collect();
                break;
            }
        }
    }
    ShootingIterate { states, controls }
}

// A warm start that leaves the model domain from the new initial state is
// replaced by the cold transcription.
fn start_iterate<M: Dynamics>(model: &M, config: &OcpConfig, x_hat: &Vector3<f64>, warm: Option<&ShootingIterate>) -> ShootingIterate {
    let it = transcribe(model, config, x_hat, warm);
    if warm.is_some() && it.defects(model, config).is_err() {
        return transcribe(model, config, x_hat, None);
    }
    it
}

/// Per-interval sensitivities of the RK4 interval map.
pub fn linearize<M: Dynamics>(model: &M, config: &OcpConfig, iterate: &ShootingIterate) -> Result<Vec<IntervalSensitivity>, (usize, Error)> {
    (0..iterate.intervals())
        .map(|k| interval_sensitivity(model, config, &iterate.states[k], iterate.controls[k]).map_err(|e| (k, e)))
        .collect()
}

/// Dense box-constrained QP `min 1/2 d^T H d + g^T d, lower <= d <= upper`
/// over the input steps, plus what is needed to recover the state steps.
#[derive(Debug, Clone)]
pub struct CondensedQp {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    /// Value of the Gauss-Newton cost model at `d = 0`.
    pub constant: f64,
    a: Vec<Matrix3<f64>>,
    b: Vec<Vector3<f64>>,
    defects: Vec<Vector3<f64>>,
}

impl CondensedQp {
    /// Model value `constant + g^T d + 1/2 d^T H d`.
    pub fn model_value(&self, d: &DVector<f64>) -> f64 {
        self.constant + self.g.dot(d) + 0.5 * d.dot(&(&self.h * d))
    }

    /// State steps `dx_0 = 0`, `dx_{k+1} = A_k dx_k + B_k du_k + defect_k`.
    pub fn expand(&self, du: &DVector<f64>) -> Vec<Vector3<f64>> {
        let n = self.b.len();
        let mut dx = Vec::with_capacity(n + 1);
        dx.push(Vector3::zeros());
        for k in 0..n {
            let next = self.a[k] * dx[k] + self.b[k] * du[k] + self.defects[k];
            dx.push(next);
        }
        dx
    }

    pub fn max_defect(&self) -> f64 {
        self.defects.iter().map(|d| d.amax()).fold(0.0, f64::max)
    }
}

/// Eliminates the state steps from the Gauss-Newton SQP subproblem.
///
/// Runs in `O(N^2)` using one forward sweep of input sensitivities and one
/// backward adjoint sweep per input column.
pub fn condense(iterate: &ShootingIterate, sens: &[IntervalSensitivity], config: &OcpConfig) -> CondensedQp {
    let n = sens.len();
    let a: Vec<Matrix3<f64>> = sens.iter().map(|s| s.a).collect();
    let b: Vec<Vector3<f64>> = sens.iter().map(|s| s.b).collect();
    let w: Vec<Matrix3<f64>> = sens.iter().map(|s| s.gram.fixed_view::<3, 3>(0, 0).into_owned()).collect();
    let cross: Vec<Vector3<f64>> = sens.iter().map(|s| s.gram.fixed_view::<3, 1>(0, 3).into_owned()).collect();
    let defects: Vec<Vector3<f64>> = (0..n).map(|k| sens[k].x_next - iterate.states[k + 1]).collect();

    // affine part of the state steps
    let mut e = vec![Vector3::zeros(); n + 1];
    for k in 0..n {
        e[k + 1] = a[k] * e[k] + defects[k];
    }

    let mut h = DMatrix::zeros(n, n);
    let mut v = vec![Vector3::zeros(); n + 1];
    for j in 0..n {
        // G_{k,j} for k = j+1 .. n-1
        let mut gk = vec![Vector3::zeros(); n];
        if j + 1 < n {
            gk[j + 1] = b[j];
            for k in j + 1..n - 1 {
                gk[k + 1] = a[k] * gk[k];
            }
        }
        v[n] = Vector3::zeros();
        for k in (j + 1..n).rev() {
            v[k] = w[k] * gk[k] + a[k].transpose() * v[k + 1];
        }
        h[(j, j)] = b[j].dot(&v[j + 1]) + sens[j].gram[(3, 3)];
        for i in j + 1..n {
            let hij = b[i].dot(&v[i + 1]) + cross[i].dot(&gk[i]);
            h[(i, j)] = hij;
            h[(j, i)] = hij;
        }
    }

    let mut g = DVector::zeros(n);
    let mut wv = Vector3::zeros();
    let mut constant = 0.0;
    for i in (0..n).rev() {
        let qx = sens[i].grad.fixed_view::<3, 1>(0, 0).into_owned();
        let qu = sens[i].grad[3];
        g[i] = 2.0 * (b[i].dot(&wv) + qu + cross[i].dot(&e[i]));
        wv = qx + w[i] * e[i] + a[i].transpose() * wv;
        constant += sens[i].cost + 2.0 * qx.dot(&e[i]) + e[i].dot(&(w[i] * e[i]));
    }
    h *= 2.0;

    let lower = DVector::from_iterator(n, iterate.controls.iter().map(|u| config.u_lower - u));
    let upper = DVector::from_iterator(n, iterate.controls.iter().map(|u| config.u_upper - u));
    CondensedQp {
        h,
        g,
        lower,
        upper,
        constant,
        a,
        b,
        defects,
    }
}

/// Bound activity of one variable in a box-QP solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActiveBound {
    Free,
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    /// Pivot budget exhausted.
    Cycling,
    /// Reduced Hessian not positive definite.
    NotConvex,
}

#[derive(Debug, Clone)]
pub struct BoxQpSolution {
    pub x: DVector<f64>,
    pub active: Vec<ActiveBound>,
    pub status: QpStatus,
    pub pivots: usize,
}

/// Projected-gradient stationarity measure `||x - P(x - (H x + g))||_inf`.
pub fn box_qp_kkt_residual(h: &DMatrix<f64>, g: &DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>, x: &DVector<f64>) -> f64 {
    let grad = h * x + g;
    (0..x.len())
        .map(|i| (x[i] - (x[i] - grad[i]).clamp(lower[i], upper[i])).abs())
        .fold(0.0, f64::max)
}

/// Primal active-set method for `min 1/2 x^T H x + g^T x`, `lower <= x <= upper`.
///
/// Starts from the projected unconstrained minimizer. Ties in blocking
/// bounds and multiplier sign violations are resolved lowest index first.
pub fn solve_box_qp(h: &DMatrix<f64>, g: &DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) -> BoxQpSolution {
    let n = g.len();
    let max_pivots = 10 * n.max(1);
    let mut active = vec![ActiveBound::Free; n];
    let mut x = DVector::zeros(n);
    let fail = |x: DVector<f64>, active: Vec<ActiveBound>, status, pivots| BoxQpSolution { x, active, status, pivots };

    match h.clone().cholesky() {
        Some(ch) => {
            let x_un = ch.solve(&(-g));
            for i in 0..n {
                if x_un[i] <= lower[i] {
                    x[i] = lower[i];
                    active[i] = ActiveBound::Lower;
                } else if x_un[i] >= upper[i] {
                    x[i] = upper[i];
                    active[i] = ActiveBound::Upper;
                } else {
                    x[i] = x_un[i];
                }
            }
        }
        None => return fail(x, active, QpStatus::NotConvex, 0),
    }

    let scale = 1.0 + g.amax() + h.amax();
    let mult_tol = 1e-13 * scale;
    let mut pivots = 0;
    loop {
        let free: Vec<usize> = (0..n).filter(|&i| active[i] == ActiveBound::Free).collect();
        if !free.is_empty() {
            // target for the free block with the active variables fixed
            let nf = free.len();
            let mut hff = DMatrix::zeros(nf, nf);
            let mut rhs = DVector::zeros(nf);
            for (a, &i) in free.iter().enumerate() {
                let mut r = -g[i];
                for j in 0..n {
                    if active[j] != ActiveBound::Free {
                        r -= h[(i, j)] * x[j];
                    }
                }
                rhs[a] = r;
                for (b, &j) in free.iter().enumerate() {
                    hff[(a, b)] = h[(i, j)];
                }
            }
            let Some(ch) = hff.cholesky() else {
                return fail(x, active, QpStatus::NotConvex, pivots);
            };
            let target = ch.solve(&rhs);
            // longest feasible step towards the target
            let mut step = 1.0;
            let mut blocking: Option<(usize, ActiveBound)> = None;
            for (a, &i) in free.iter().enumerate() {
                let p = target[a] - x[i];
                if p < 0.0 && target[a] < lower[i] {
                    let t = (lower[i] - x[i]) / p;
                    if t < step {
                        step = t;
                        blocking = Some((i, ActiveBound::Lower));
                    }
                } else if p > 0.0 && target[a] > upper[i] {
                    let t = (upper[i] - x[i]) / p;
                    if t < step {
                        step = t;
                        blocking = Some((i, ActiveBound::Upper));
                    }
                }
            }
            for (a, &i) in free.iter().enumerate() {
                x[i] += step.max(0.0) * (target[a] - x[i]);
            }
            if let Some((i, bound)) = blocking {
                x[i] = if bound == ActiveBound::Lower { lower[i] } else { upper[i] };
                active[i] = bound;
                pivots += 1;
                if pivots > max_pivots {
                    return fail(x, active, QpStatus::Cycling, pivots);
                }
                continue;
            }
            for (a, &i) in free.iter().enumerate() {
                x[i] = target[a];
            }
        }
        // multiplier signs of the active bounds
        let grad = h * &x + g;
        let release = (0..n).find(|&i| match active[i] {
            ActiveBound::Lower => grad[i] < -mult_tol,
            ActiveBound::Upper => grad[i] > mult_tol,
            ActiveBound::Free => false,
        });
        match release {
            None => {
                return BoxQpSolution {
                    x,
                    active,
                    status: QpStatus::Optimal,
                    pivots,
                }
            }
            Some(i) => {
                active[i] = ActiveBound::Free;
                pivots += 1;
                if pivots > max_pivots {
                    return fail(x, active, QpStatus::Cycling, pivots);
                }
            }
        }
    }
}

/// SQP tolerances and budgets.
#[derive(Debug, Clone, PartialEq)]
pub struct SqpSettings {
    pub max_iter: usize,
    /// Tolerance on `||u - P(u - grad/delta_N)||_inf`.
    pub kkt_tol: f64,
    pub defect_tol: f64,
    pub max_halvings: usize,
    /// Full steps are taken without a line search below this defect level.
    pub full_step_defect: f64,
}

impl Default for SqpSettings {
    fn default() -> Self {
        Self {
            max_iter: 50,
            kkt_tol: 1e-8,
            defect_tol: 1e-9,
            max_halvings: 8,
            full_step_defect: 1e-6,
        }
    }
}

fn objective<M: Dynamics>(model: &M, config: &OcpConfig, it: &ShootingIterate) -> Result<(f64, f64), (usize, Error)> {
    let mut cost = 0.0;
    let mut defect_l1 = 0.0;
    for k in 0..it.intervals() {
        let (x, c) = interval_map(model, config, &it.states[k], it.controls[k]).map_err(|e| (k, e))?;
        cost += c;
        defect_l1 += (x - it.states[k + 1]).abs().sum();
    }
    Ok((cost, defect_l1))
}

/// Reduced-gradient stationarity of the condensed subproblem at `d = 0`,
/// expressed per unit time.
fn kkt_residual(qp: &CondensedQp, config: &OcpConfig) -> f64 {
    let dt = config.interval();
    (0..qp.g.len())
        .map(|i| {
            let g = qp.g[i] / dt;
            (0.0f64 - (-g).clamp(qp.lower[i], qp.upper[i])).abs()
        })
        .fold(0.0, f64::max)
}

fn result_from(it: ShootingIterate, objective: f64, kkt: f64, defect: f64, iterations: usize, start: Instant, status: SolveStatus, failed_node: Option<usize>) -> SolveResult {
    SolveResult {
        controls: it.controls,
        states: it.states,
        objective,
        kkt_residual: kkt,
        max_defect: defect,
        iterations,
        wall_time: start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE),
        status,
        failed_node,
    }
}

/// Gauss-Newton SQP on the multiple-shooting NLP, globalized by backtracking
/// on `cost + mu * ||defects||_1`.
///
/// A solve that stalls or leaves the model domain is restarted from a
/// rollout of the warm-start inputs and then from the cold transcription.
/// The first converged restart is returned, else the first attempt.
pub fn sqp_solve<M: Dynamics>(model: &M, config: &OcpConfig, x_hat: &Vector3<f64>, warm: Option<&ShootingIterate>, settings: &SqpSettings) -> SolveResult {
    let start = Instant::now();
    let first = sqp_iterate(model, config, start_iterate(model, config, x_hat, warm), settings, start);
    if !matches!(first.status, SolveStatus::LineSearchStall | SolveStatus::DomainError) {
        return first;
    }
    let mut iterations = first.iterations;
    let restarts = warm.and_then(|w| rollout(model, config, x_hat, &w.controls)).into_iter().chain(std::iter::once(transcribe(model, config, x_hat, None)));
    for it in restarts {
        let mut r = sqp_iterate(model, config, it, settings, start);
        iterations += r.iterations;
        if r.status == SolveStatus::Converged {
            r.iterations = iterations;
            return r;
        }
    }
    SolveResult {
        iterations,
        wall_time: start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE),
        ..first
    }
}

// Nodes from integrating `controls` (clamped, shifted one interval) from
// `x_hat`; `None` when the rollout leaves the domain.
fn rollout<M: Dynamics>(model: &M, config: &OcpConfig, x_hat: &Vector3<f64>, controls: &[f64]) -> Option<ShootingIterate> {
    let n = config.intervals;
    if controls.len() != n {
        return None;
    }
    let controls: Vec<f64> = controls.iter().map(|u| u.clamp(config.u_lower, config.u_upper)).collect();
    let mut states = Vec::with_capacity(n + 1);
    states.push(*x_hat);
    for k in 0..n {
        states.push(interval_map(model, config, &states[k], controls[k]).ok()?.0);
    }
    Some(ShootingIterate { states, controls })
}

fn sqp_iterate<M: Dynamics>(model: &M, config: &OcpConfig, mut it: ShootingIterate, settings: &SqpSettings, start: Instant) -> SolveResult {
    let mut mu: f64 = 0.0;
    let mut last_kkt = f64::INFINITY;
    let mut last_defect = f64::INFINITY;
    for iter in 0..settings.max_iter {
        let sens = match linearize(model, config, &it) {
            Ok(s) => s,
            Err((k, _)) => {
                return result_from(it, f64::NAN, last_kkt, last_defect, iter, start, SolveStatus::DomainError, Some(k));
            }
        };
        let qp = condense(&it, &sens, config);
        let kkt = kkt_residual(&qp, config);
        let defect = qp.max_defect();
        let cost: f64 = sens.iter().map(|s| s.cost).sum();
        last_kkt = kkt;
        last_defect = defect;
        if defect < settings.defect_tol && kkt < settings.kkt_tol {
            return result_from(it, cost, kkt, defect, iter, start, SolveStatus::Converged, None);
        }
        let sol = solve_box_qp(&qp.h, &qp.g, &qp.lower, &qp.upper);
        if sol.status != QpStatus::Optimal {
            return result_from(it, cost, kkt, defect, iter, start, SolveStatus::QpFailure, None);
        }
        let du = sol.x;
        let dx = qp.expand(&du);

        // penalty parameter from the continuity multipliers
        let n = it.intervals();
        let mut lambda = Vector3::zeros();
        let mut lam_max: f64 = 0.0;
        for k in (0..n).rev() {
            let s = &sens[k];
            let qx = s.grad.fixed_view::<3, 1>(0, 0).into_owned();
            let w = s.gram.fixed_view::<3, 3>(0, 0).into_owned();
            let c = s.gram.fixed_view::<3, 1>(0, 3).into_owned();
            lambda = (qx + w * dx[k] + c * du[k]) * 2.0 + s.a.transpose() * lambda;
            lam_max = lam_max.max(lambda.amax());
        }
        mu = mu.max(1.5 * lam_max + 1e-8);

        let step_of = |alpha: f64| ShootingIterate {
            states: it.states.iter().zip(&dx).map(|(x, d)| x + d * alpha).collect(),
            controls: it.controls.iter().zip(du.iter()).map(|(u, d)| u + d * alpha).collect(),
        };

        let defect_l1: f64 = qp.defects.iter().map(|d| d.abs().sum()).sum();
        if defect < settings.full_step_defect {
            let trial = step_of(1.0);
            if objective(model, config, &trial).is_ok() {
                it = trial;
                continue;
            }
        }
        let merit0 = cost + mu * defect_l1;
        let mut slope = -mu * defect_l1;
        for k in 0..n {
            let g = &sens[k].grad;
            slope += 2.0 * (g.fixed_view::<3, 1>(0, 0).dot(&dx[k]) + g[3] * du[k]);
        }
        let mut accepted = None;
        let mut alpha = 1.0;
        for _ in 0..=settings.max_halvings {
            let trial = step_of(alpha);
            if let Ok((c, d1)) = objective(model, config, &trial) {
                if c + mu * d1 <= merit0 + 1e-4 * alpha * slope.min(0.0) {
                    accepted = Some(trial);
                    break;
                }
            }
            alpha *= 0.5;
        }
        match accepted {
            Some(trial) => it = trial,
            None => {
                return result_from(it, cost, kkt, defect, iter + 1, start, SolveStatus::LineSearchStall, None);
            }
        }
    }
    let (cost, defect, kkt) = match linearize(model, config, &it) {
        Ok(sens) => {
            let qp = condense(&it, &sens, config);
            (sens.iter().map(|s| s.cost).sum(), qp.max_defect(), kkt_residual(&qp, config))
        }
        Err(_) => (f64::NAN, last_defect, last_kkt),
    };
    let status = if defect < settings.defect_tol && kkt < settings.kkt_tol {
        SolveStatus::Converged
    } else {
        SolveStatus::MaxIter
    };
    result_from(it, cost, kkt, defect, settings.max_iter, start, status, None)
}

/// One linearize-condense-QP cycle with a full step. Returns the updated
/// iterate and the cycle status.
pub fn rti_iteration<M: Dynamics>(model: &M, config: &OcpConfig, x_hat: &Vector3<f64>, guess: &ShootingIterate) -> (ShootingIterate, SolveStatus, Option<usize>) {
    let mut it = transcribe(model, config, x_hat, Some(guess));
    let sens = match linearize(model, config, &it) {
        Ok(s) => s,
        Err(_) => {
            it = transcribe(model, config, x_hat, None);
            match linearize(model, config, &it) {
                Ok(s) => s,
                Err((k, _)) => return (it, SolveStatus::DomainError, Some(k)),
            }
        }
    };
    let qp = condense(&it, &sens, config);
    let sol = solve_box_qp(&qp.h, &qp.g, &qp.lower, &qp.upper);
    if sol.status != QpStatus::Optimal {
        return (it, SolveStatus::QpFailure, None);
    }
    let dx = qp.expand(&sol.x);
    for (x, d) in it.states.iter_mut().zip(&dx) {
        *x += d;
    }
    for (u, d) in it.controls.iter_mut().zip(sol.x.iter()) {
        *u = (*u + d).clamp(config.u_lower, config.u_upper);
    }
    (it, SolveStatus::MaxIter, None)
}

/// Output of one real-time iteration.
#[derive(Debug, Clone)]
pub struct RtiOutput {
    pub u_applied: f64,
    pub solution: ShootingIterate,
    /// Wall time [s].
    pub wall_time: f64,
    pub status: SolveStatus,
}

/// Real-time iteration controller state: the shifted previous solution.
#[derive(Debug, Clone, Default)]
pub struct RtiSolver {
    guess: Option<ShootingIterate>,
    /// Sampling period [s]; `None` shifts by one full interval.
    sampling: Option<f64>,
}

impl RtiSolver {
    pub fn new() -> Self {
        Self::default()
    }

    /// Solver whose warm start advances by `delta` seconds per step.
    pub fn with_sampling(delta: f64) -> Self {
        Self {
            guess: None,
            sampling: Some(delta),
        }
    }

    pub fn reset(&mut self) {
        self.guess = None;
    }

    pub fn guess(&self) -> Option<&ShootingIterate> {
        self.guess.as_ref()
    }

    /// One real-time iteration at the measured state; stores the solution
    /// shifted by one sampling period as the next warm start.
    pub fn step<M: Dynamics>(&mut self, model: &M, config: &OcpConfig, x_hat: &Vector3<f64>) -> RtiOutput {
        let start = Instant::now();
        let guess = match self.guess.take() {
            Some(g) if g.intervals() == config.intervals => g,
            _ => transcribe(model, config, x_hat, None),
        };
        let (sol, status, _) = rti_iteration(model, config, x_hat, &guess);
        let u_applied = sol.controls[0];
        let fraction = self.sampling.map_or(1.0, |d| d / config.interval());
        self.guess = Some(sol.shifted_by(fraction));
        RtiOutput {
            u_applied,
            solution: sol,
            wall_time: start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE),
            status,
        }
    }
}

/// See [`RtiSolver::step`].
pub fn rti_step<M: Dynamics>(solver: &mut RtiSolver, model: &M, config: &OcpConfig, x_hat: &Vector3<f64>) -> RtiOutput {
    solver.step(model, config, x_hat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ocp::tests::default_model;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn perturbed() -> Vector3<f64> {
        // 2 mm below nominal gap, scaled
        Vector3::new(0.2, 0.0, 0.0)
    }

    fn config(n: usize) -> OcpConfig {
        OcpConfig::new(&default_model()).with_horizon(0.05, n)
    }

    // Gauss-Newton model evaluated by brute force along a rolled-out step.
    fn dense_model(it: &ShootingIterate, sens: &[IntervalSensitivity], du: &DVector<f64>) -> f64 {
        let mut dx = Vector3::zeros();
        let mut total = 0.0;
        for k in 0..sens.len() {
            let d = nalgebra::Vector4::new(dx[0], dx[1], dx[2], du[k]);
            total += sens[k].cost + 2.0 * sens[k].grad.dot(&d) + d.dot(&(sens[k].gram * d));
            dx = sens[k].a * dx + sens[k].b * du[k] + (sens[k].x_next - it.states[k + 1]);
        }
        total
    }

    #[test]
    fn condensing_matches_dense_construction() {
        let model = default_model();
        for n in 1..=5 {
            let cfg = config(n);
            let mut it = transcribe(&model, &cfg, &perturbed(), None);
            // non-zero defects and inputs
            for (k, x) in it.states.iter_mut().enumerate().skip(1) {
                x[0] += 0.01 * k as f64;
                x[2] -= 0.02;
            }
            for (k, u) in it.controls.iter_mut().enumerate() {
                *u = 0.1 * (k as f64 - 1.0);
            }
            let sens = linearize(&model, &cfg, &it).unwrap();
            let qp = condense(&it, &sens, &cfg);
            let zero = DVector::zeros(n);
            let f0 = dense_model(&it, &sens, &zero);
            assert!((qp.constant - f0).abs() <= 1e-9 * f0.abs().max(1.0));
            let unit = |i: usize| {
                let mut e = DVector::zeros(n);
                e[i] = 1.0;
                e
            };
            for i in 0..n {
                for j in 0..n {
                    let fij = dense_model(&it, &sens, &(unit(i) + unit(j)));
                    let fi = dense_model(&it, &sens, &unit(i));
                    let fj = dense_model(&it, &sens, &unit(j));
                    let hij = if i == j { fij - 2.0 * fi + f0 } else { fij - fi - fj + f0 };
                    let tol = 1e-7 * (1.0 + qp.h[(i, j)].abs());
                    assert!((qp.h[(i, j)] - hij).abs() < tol, "H[{i},{j}] {} vs {}", qp.h[(i, j)], hij);
                }
                let fi = dense_model(&it, &sens, &unit(i));
                let gi = fi - f0 - 0.5 * qp.h[(i, i)];
                assert!((qp.g[i] - gi).abs() < 1e-7 * (1.0 + gi.abs()), "g[{i}]");
            }
            let du = DVector::from_fn(n, |i, _| 0.3 - 0.1 * i as f64);
            let m = dense_model(&it, &sens, &du);
            assert!((qp.model_value(&du) - m).abs() < 1e-8 * m.abs().max(1.0));
        }
    }

    fn projected_gradient(h: &DMatrix<f64>, g: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
        let eig = h.clone().symmetric_eigen();
        let step = 1.0 / eig.eigenvalues.max();
        let mut x = DVector::zeros(g.len());
        for _ in 0..200_000 {
            let grad = h * &x + g;
            let next = DVector::from_fn(x.len(), |i, _| (x[i] - step * grad[i]).clamp(lo[i], hi[i]));
            let done = (&next - &x).amax() < 1e-15;
            x = next;
            if done {
                break;
            }
        }
        x
    }

    #[test]
    fn box_qp_agrees_with_projected_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let m = DMatrix::from_fn(5, 5, |_, _| rng.gen_range(-1.0..1.0));
            let h = &m * m.transpose() + DMatrix::identity(5, 5) * 0.5;
            let g = DVector::from_fn(5, |_, _| rng.gen_range(-3.0..3.0));
            let lo = DVector::from_fn(5, |_, _| rng.gen_range(-1.0..-0.1));
            let hi = DVector::from_fn(5, |_, _| rng.gen_range(0.1..1.0));
            let sol = solve_box_qp(&h, &g, &lo, &hi);
            assert_eq!(sol.status, QpStatus::Optimal);
            let oracle = projected_gradient(&h, &g, &lo, &hi);
            assert!((&sol.x - &oracle).amax() < 1e-8, "{} vs {}", sol.x, oracle);
            assert!(box_qp_kkt_residual(&h, &g, &lo, &hi, &sol.x) < 1e-10);
        }
    }

    #[test]
    fn box_qp_rejects_indefinite_hessian() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let g = DVector::zeros(2);
        let b = DVector::from_element(2, 1.0);
        assert_eq!(solve_box_qp(&h, &g, &(-&b), &b).status, QpStatus::NotConvex);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn box_qp_solution_is_feasible_and_stationary(seed in any::<u64>(), n in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let h = &m * m.transpose() + DMatrix::identity(n, n) * 0.1;
            let g = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));
            let lo = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..0.0));
            let hi = DVector::from_fn(n, |_, _| rng.gen_range(0.0..1.0));
            let sol = solve_box_qp(&h, &g, &lo, &hi);
            prop_assert_eq!(sol.status, QpStatus::Optimal);
            for i in 0..n {
                prop_assert!(sol.x[i] >= lo[i] && sol.x[i] <= hi[i]);
            }
            prop_assert!(box_qp_kkt_residual(&h, &g, &lo, &hi, &sol.x) < 1e-9);
        }
    }

    #[test]
    fn origin_needs_no_iteration() {
        let model = default_model();
        let cfg = config(25);
        let res = sqp_solve(&model, &cfg, &Vector3::zeros(), None, &SqpSettings::default());
        assert_eq!(res.status, SolveStatus::Converged);
        assert_eq!(res.iterations, 0);
        assert!(res.controls.iter().all(|&u| u == 0.0));
        assert_eq!(res.objective, 0.0);
    }

    #[test]
    fn sqp_converges_from_perturbation() {
        let model = default_model();
        let cfg = config(25);
        let res = sqp_solve(&model, &cfg, &perturbed(), None, &SqpSettings::default());
        assert_eq!(res.status, SolveStatus::Converged, "{res:?}");
        assert!(res.kkt_residual < 1e-8);
        assert!(res.max_defect < 1e-9);
        assert!(res.controls.iter().all(|&u| u >= cfg.u_lower && u <= cfg.u_upper));
        // gap above nominal calls for more current, i.e. positive input
        assert!(res.controls[0] > 0.0);
    }

    #[test]
    fn warm_start_does_not_change_the_optimum() {
        let model = default_model();
        let cfg = config(25);
        let cold = sqp_solve(&model, &cfg, &perturbed(), None, &SqpSettings::default());
        let guess = ShootingIterate {
            states: cold.states.clone(),
            controls: cold.controls.clone(),
        };
        let warm = sqp_solve(&model, &cfg, &perturbed(), Some(&guess), &SqpSettings::default());
        assert_eq!(warm.status, SolveStatus::Converged);
        assert!(warm.iterations <= 1);
        for (a, b) in warm.controls.iter().zip(&cold.controls) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn repeated_rti_reaches_sqp_solution() {
        let model = default_model();
        let cfg = config(25);
        let x = perturbed();
        let sqp = sqp_solve(&model, &cfg, &x, None, &SqpSettings::default());
        let mut it = transcribe(&model, &cfg, &x, None);
        for _ in 0..20 {
            let (next, status, _) = rti_iteration(&model, &cfg, &x, &it);
            assert_ne!(status, SolveStatus::QpFailure);
            it = next;
        }
        for (a, b) in it.controls.iter().zip(&sqp.controls) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn shift_drops_first_and_repeats_last() {
        let it = ShootingIterate {
            states: (0..4).map(|k| Vector3::new(k as f64, 0.0, 0.0)).collect(),
            controls: vec![1.0, 2.0, 3.0],
        };
        let s = it.shifted();
        assert_eq!(s.controls, vec![2.0, 3.0, 3.0]);
        assert_eq!(s.states.iter().map(|x| x[0]).collect::<Vec<_>>(), vec![1.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn fractional_shift_interpolates() {
        let it = ShootingIterate {
            states: (0..4).map(|k| Vector3::new(k as f64, 0.0, 0.0)).collect(),
            controls: vec![1.0, 2.0, 4.0],
        };
        let s = it.shifted_by(0.5);
        assert_eq!(s.controls, vec![1.5, 3.0, 4.0]);
        assert_eq!(s.states.iter().map(|x| x[0]).collect::<Vec<_>>(), vec![0.5, 1.5, 2.5, 3.0]);
        assert_eq!(it.shifted_by(0.0), it);
    }

    #[test]
    fn rti_solver_stores_shifted_solution() {
        let model = default_model();
        let cfg = config(10);
        let mut solver = RtiSolver::new();
        let out = solver.step(&model, &cfg, &perturbed());
        assert!(out.wall_time > 0.0);
        assert_eq!(solver.guess().unwrap().controls[0], out.solution.controls[1]);
    }

    #[test]
    fn state_outside_window_is_a_domain_error() {
        let model = default_model();
        let cfg = config(10);
        // 10 mm closer than nominal gives s = 0
        let res = sqp_solve(&model, &cfg, &Vector3::new(-1.0, 0.0, 0.0), None, &SqpSettings::default());
        assert_eq!(res.status, SolveStatus::DomainError);
        assert_eq!(res.failed_node, Some(0));
    }
}
