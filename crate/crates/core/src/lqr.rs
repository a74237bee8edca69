//! Discrete LQR on the model linearized at the equilibrium.
//!
//! The continuous output cost `y^T Q y + R u^2` is mapped to the state as
//! `Q_x = C_y^T Q C_y`. Both dynamics and cost are discretized exactly for a
//! zero-order-held input, so the gain is the true infinite-horizon optimum of
//! the sampled linear problem.

use nalgebra::{DMatrix, Matrix3, RowVector3, Vector3};

use crate::error::{Error, Result};
use crate::ocp::{Dynamics, OcpConfig};

/// `exp(m)` by scaling and squaring of the truncated Taylor series.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let norm = m.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let mut squarings = 0;
    let mut scale = 1.0;
    while norm * scale > 0.25 {
        scale *= 0.5;
        squarings += 1;
    }
    let a = m * scale;
    // ||a|| <= 1/4, so 18 terms leave a remainder far below 1e-16
    let mut term = DMatrix::identity(n, n);
    let mut sum = DMatrix::identity(n, n);
    for k in 1..=18 {
        term = &term * &a / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Sampled linear model of the scaled dynamics at the origin.
#[derive(Debug, Clone)]
pub struct LinearModel {
    /// Continuous-time Jacobians.
    pub a: Matrix3<f64>,
    pub b: Vector3<f64>,
    /// Discrete-time system at the sampling period.
    pub a_d: Matrix3<f64>,
    pub b_d: Vector3<f64>,
    /// Output Jacobian at the origin.
    pub c_y: Matrix3<f64>,
    pub delta: f64,
}

/// Linearizes the model at `(0, 0)` and discretizes with a zero-order hold.
pub fn linearize_origin<M: Dynamics>(model: &M, delta: f64) -> Result<LinearModel> {
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter("sampling period must be positive".into()));
    }
    let lin = model.linearize(&Vector3::zeros(), 0.0)?;
    let mut aug = DMatrix::zeros(4, 4);
    aug.view_mut((0, 0), (3, 3)).copy_from(&lin.a);
    aug.view_mut((0, 3), (3, 1)).copy_from(&lin.b);
    let e = expm(&(aug * delta));
    Ok(LinearModel {
        a: lin.a,
        b: lin.b,
        a_d: e.fixed_view::<3, 3>(0, 0).into_owned(),
        b_d: e.fixed_view::<3, 1>(0, 3).into_owned(),
        c_y: lin.c_y,
        delta,
    })
}

/// Sampled cost `sum x^T Qd x + 2 x^T N u + Rd u^2` equal to the integral of
/// the continuous cost over each hold period.
#[derive(Debug, Clone)]
pub struct SampledCost {
    pub q: Matrix3<f64>,
    pub cross: Vector3<f64>,
    pub r: f64,
}

/// Exact discretization of `x^T Q_x x + R u^2` under a zero-order hold.
pub fn sampled_cost(model: &LinearModel, q_x: &Matrix3<f64>, r: f64) -> SampledCost {
    let mut ah = DMatrix::zeros(4, 4);
    ah.view_mut((0, 0), (3, 3)).copy_from(&model.a);
    ah.view_mut((0, 3), (3, 1)).copy_from(&model.b);
    let mut qh = DMatrix::zeros(4, 4);
    qh.view_mut((0, 0), (3, 3)).copy_from(q_x);
    qh[(3, 3)] = r;
    let mut big = DMatrix::zeros(8, 8);
    big.view_mut((0, 0), (4, 4)).copy_from(&(-ah.transpose()));
    big.view_mut((0, 4), (4, 4)).copy_from(&qh);
    big.view_mut((4, 4), (4, 4)).copy_from(&ah);
    let e = expm(&(big * model.delta));
    let f22 = e.view((4, 4), (4, 4)).into_owned();
    let f12 = e.view((0, 4), (4, 4)).into_owned();
    let mut qd = f22.transpose() * f12;
    qd = (&qd + qd.transpose()) * 0.5;
    SampledCost {
        q: qd.fixed_view::<3, 3>(0, 0).into_owned(),
        cross: qd.fixed_view::<3, 1>(0, 3).into_owned(),
        r: qd[(3, 3)],
    }
}

/// Riccati solution and feedback gain.
#[derive(Debug, Clone)]
pub struct LqrGain {
    pub k: RowVector3<f64>,
    pub p: Matrix3<f64>,
    pub residual: f64,
    pub iterations: usize,
}

impl LqrGain {
    /// Unsaturated `u = -K x`.
    pub fn control(&self, x: &Vector3<f64>) -> f64 {
        -(self.k * x)[0]
    }
}

/// Result of the dense Riccati iteration.
#[derive(Debug, Clone)]
pub struct DareSolution {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub residual: f64,
    pub iterations: usize,
}

fn riccati_map(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, cross: &DMatrix<f64>, p: &DMatrix<f64>) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let bp = b.transpose() * p;
    let s = r + &bp * b;
    let rhs = &bp * a + cross.transpose();
    let k = s.cholesky()?.solve(&rhs);
    let next = a.transpose() * p * a - (a.transpose() * p * b + cross) * &k + q;
    Some(((&next + next.transpose()) * 0.5, k))
}

/// Fixed-point iteration of the discrete Riccati equation with cross term,
/// started from `P = Q`, until `||P - Ric(P)||_inf < tol`.
pub fn solve_dare_dense(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, cross: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<DareSolution> {
    let mut p = q.clone();
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        let Some((next, _)) = riccati_map(a, b, q, r, cross, &p) else {
            return Err(Error::Unstabilizable { residual, iterations: it });
        };
        residual = (&next - &p).amax();
        p = next;
        if !residual.is_finite() {
            break;
        }
        if residual < tol {
            let (check, k) = riccati_map(a, b, q, r, cross, &p).ok_or(Error::Unstabilizable { residual, iterations: it })?;
            return Ok(DareSolution {
                residual: (&check - &p).amax(),
                p,
                k,
                iterations: it,
            });
        }
    }
    Err(Error::Unstabilizable {
        residual,
        iterations: max_iter,
    })
}

/// Solves the sampled LQ problem for the maglev model.
pub fn solve_dare(model: &LinearModel, cost: &SampledCost) -> Result<LqrGain> {
    let a = DMatrix::from_iterator(3, 3, model.a_d.iter().copied());
    let b = DMatrix::from_iterator(3, 1, model.b_d.iter().copied());
    let q = DMatrix::from_iterator(3, 3, cost.q.iter().copied());
    let r = DMatrix::from_element(1, 1, cost.r);
    let n = DMatrix::from_iterator(3, 1, cost.cross.iter().copied());
    let sol = solve_dare_dense(&a, &b, &q, &r, &n, 1e-10, 100_000)?;
    let k = RowVector3::new(sol.k[(0, 0)], sol.k[(0, 1)], sol.k[(0, 2)]);
    let gain = LqrGain {
        k,
        p: Matrix3::from_iterator(sol.p.iter().copied()),
        residual: sol.residual,
        iterations: sol.iterations,
    };
    if spectral_radius(&closed_loop(model, &gain)) >= 1.0 {
        return Err(Error::Unstabilizable {
            residual: gain.residual,
            iterations: gain.iterations,
        });
    }
    Ok(gain)
}

/// `A_d - B_d K`.
pub fn closed_loop(model: &LinearModel, gain: &LqrGain) -> Matrix3<f64> {
    model.a_d - model.b_d * gain.k
}

pub fn spectral_radius(m: &Matrix3<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Saturation-free state feedback designed from the OCP weights.
#[derive(Debug, Clone)]
pub struct LqrController {
    pub model: LinearModel,
    pub gain: LqrGain,
}

impl LqrController {
    /// Builds the controller for sampling period `delta` using the output
    /// weights of `config`.
    pub fn design<M: Dynamics>(model: &M, config: &OcpConfig, delta: f64) -> Result<Self> {
        let lin = linearize_origin(model, delta)?;
        let q_x = lin.c_y.transpose() * config.q_matrix() * lin.c_y;
        let cost = sampled_cost(&lin, &q_x, config.r);
        let gain = solve_dare(&lin, &cost)?;
        Ok(Self { model: lin, gain })
    }

    pub fn control(&self, x_hat: &Vector3<f64>) -> f64 {
        self.gain.control(x_hat)
    }
}

/// See [`LqrGain::control`].
pub fn lqr_control(gain: &LqrGain, x_hat: &Vector3<f64>) -> f64 {
    gain.control(x_hat)
}
