//! Optimal control problem shared by both solver families.
//!
//! All quantities in this module are scaled. The stage cost is
//! `l(x, u) = y(x)^T Q y(x) + R u^2` where `y` is the scaled deviation of the
//! outputs `(s, zdd, I)` from their nominal values `(s0, 0, I0)`.
//!
//! The continuous cost integral is discretized together with the dynamics:
//! every RK4 step of length `h` contributes `h/6 (l1 + 2 l2 + 2 l3 + l4)`,
//! evaluated at the four stage states with the step's constant input. Both the
//! multiple-shooting solver and the gradient projection solver use exactly
//! this discretization, so their optima coincide.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::synthesis::{ScalingConfig, SynthState, SynthesisModel};

/// RK4 stage weights.
pub(crate) const RK4_WEIGHTS: [f64; 4] = [1.0 / 6.0, 2.0 / 6.0, 2.0 / 6.0, 1.0 / 6.0];

/// Dynamics, output map and their first derivatives at one point.
#[derive(Debug, Clone, Copy)]
pub struct Linearization {
    pub f: Vector3<f64>,
    pub a: Matrix3<f64>,
    pub b: Vector3<f64>,
    pub y: Vector3<f64>,
    pub c_y: Matrix3<f64>,
}

/// A scaled control-affine-ish model `dx/dt = f(x, u)`, `y = h(x)`.
pub trait Dynamics {
    fn deriv(&self, x: &Vector3<f64>, u: f64) -> Result<Vector3<f64>>;
    fn output(&self, x: &Vector3<f64>) -> Result<Vector3<f64>>;
    fn linearize(&self, x: &Vector3<f64>, u: f64) -> Result<Linearization>;

    /// `(f(x, u), h(x))` in one evaluation.
    fn eval(&self, x: &Vector3<f64>, u: f64) -> Result<(Vector3<f64>, Vector3<f64>)> {
        Ok((self.deriv(x, u)?, self.output(x)?))
    }
}

/// The synthesis model in scaled coordinates with a fixed load estimate.
#[derive(Debug, Clone)]
pub struct ControlModel {
    pub synthesis: SynthesisModel,
    pub scaling: ScalingConfig,
    load_estimate: f64,
}

impl ControlModel {
    pub fn new(synthesis: SynthesisModel, scaling: ScalingConfig) -> Result<Self> {
        scaling.validate()?;
        let load_estimate = synthesis.params.load_force;
        Ok(Self {
            synthesis,
            scaling,
            load_estimate,
        })
    }

    pub fn load_estimate(&self) -> f64 {
        self.load_estimate
    }

    /// Sets `F_hat_load` used by subsequent predictions.
    pub fn set_load_estimate(&mut self, f_hat: f64) {
        self.load_estimate = f_hat;
    }

    fn shifted(&self, x: &Vector3<f64>) -> SynthState {
        self.scaling.unscale_state(x)
    }

    fn output_deviation(&self, y_abs: &Vector3<f64>) -> Vector3<f64> {
        let eq = &self.synthesis.eq;
        self.scaling
            .scale_output(&Vector3::new(y_abs[0] - eq.s0, y_abs[1], y_abs[2] - eq.i0))
    }

    /// Scaled input bounds `[(U_min - U0), (U_max - U0)] / scale`.
    pub fn input_bounds(&self) -> (f64, f64) {
        let p = &self.synthesis.params;
        let u0 = self.synthesis.eq.u0;
        (
            self.scaling.scale_input(p.u_min - u0),
            self.scaling.scale_input(p.u_max - u0),
        )
    }
}

impl Dynamics for ControlModel {
    fn deriv(&self, x: &Vector3<f64>, u: f64) -> Result<Vector3<f64>> {
        let d = self.synthesis.deriv(
            &self.shifted(x),
            self.scaling.unscale_input(u),
            self.load_estimate,
        )?;
        Ok(self.scaling.scale_state(&d))
    }

    fn output(&self, x: &Vector3<f64>) -> Result<Vector3<f64>> {
        let y = self.synthesis.output(&self.shifted(x), self.load_estimate)?;
        Ok(self.output_deviation(&y))
    }

    fn eval(&self, x: &Vector3<f64>, u: f64) -> Result<(Vector3<f64>, Vector3<f64>)> {
        let xs = self.shifted(x);
        let syn = &self.synthesis;
        let s = syn.eq.s0 + xs.ds;
        let current = syn.eq.i0 + xs.di;
        let force = syn.magnet.force(s, current)?;
        let rate = syn
            .magnet
            .current_rate(s, xs.sdot, current, syn.eq.u0 + self.scaling.unscale_input(u))?;
        let accel = syn.accel_from_force(force, self.load_estimate);
        let [sx0, sx1, sx2] = self.scaling.state;
        let [sy0, sy1, sy2] = self.scaling.output;
        Ok((
            Vector3::new(xs.sdot / sx0, accel / sx1, rate / sx2),
            Vector3::new(xs.ds / sy0, accel / sy1, xs.di / sy2),
        ))
    }

    fn linearize(&self, x: &Vector3<f64>, u: f64) -> Result<Linearization> {
        let xs = self.shifted(x);
        let p = self.synthesis.partials(&xs, self.scaling.unscale_input(u))?;
        let m = self.synthesis.params.mass;
        let accel = self.synthesis.accel_from_force(p.force, self.load_estimate);
        let [sx0, sx1, sx2] = self.scaling.state;
        let su = self.scaling.input;
        let [sy0, sy1, sy2] = self.scaling.output;

        // unscaled Jacobians, columns (ds, sdot, dI)
        let a_raw = Matrix3::new(
            0.0, 1.0, 0.0,
            -p.force_s / m, 0.0, -p.force_i / m,
            p.rate_s, p.rate_sdot, p.rate_i,
        );
        let dx = Vector3::new(sx0, sx1, sx2);
        let mut a = a_raw;
        for r in 0..3 {
            for c in 0..3 {
                a[(r, c)] *= dx[c] / dx[r];
            }
        }
        let b = Vector3::new(0.0, 0.0, p.rate_u * su / sx2);
        let f = Vector3::new(xs.sdot / sx0, accel / sx1, p.rate / sx2);
        let y = Vector3::new(
            xs.ds / sy0,
            accel / sy1,
            xs.di / sy2,
        );
        let c_y = Matrix3::new(
            sx0 / sy0, 0.0, 0.0,
            -p.force_s / m * sx0 / sy1, 0.0, -p.force_i / m * sx2 / sy1,
            0.0, 0.0, sx2 / sy2,
        );
        Ok(Linearization { f, a, b, y, c_y })
    }
}

/// OCP horizon, discretization, weights and input bounds (scaled).
#[derive(Debug, Clone, PartialEq)]
pub struct OcpConfig {
    /// Prediction horizon `T` [s].
    pub horizon: f64,
    /// Number of shooting intervals `N`; `delta_N = T / N`.
    pub intervals: usize,
    /// RK4 steps per interval.
    pub substeps: usize,
    /// Output weights `(Q_s, Q_zdd, Q_I)`.
    pub q: [f64; 3],
    /// Input weight.
    pub r: f64,
    /// Scaled input bounds.
    pub u_lower: f64,
    pub u_upper: f64,
}

impl OcpConfig {
    /// Default weights `Q = diag(75, 15, 5)`, `R = 1`, `T = 50 ms`, `N = 25`,
    /// two RK4 steps per interval.
    pub fn new(model: &ControlModel) -> Self {
        let (u_lower, u_upper) = model.input_bounds();
        Self {
            horizon: 0.05,
            intervals: 25,
            substeps: 2,
            q: [75.0, 15.0, 5.0],
            r: 1.0,
            u_lower,
            u_upper,
        }
    }

    pub fn with_horizon(mut self, horizon: f64, intervals: usize) -> Self {
        self.horizon = horizon;
        self.intervals = intervals;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if !(self.horizon > 0.0) {
            return bad("horizon must be positive");
        }
        if self.intervals == 0 || self.substeps == 0 {
            return bad("intervals and substeps must be at least 1");
        }
        if !self.q.iter().all(|&q| q >= 0.0) {
            return bad("output weights must be non-negative");
        }
        if !(self.r > 0.0) {
            return bad("input weight must be positive");
        }
        if !(self.u_lower < self.u_upper) {
            return bad("input bounds must satisfy lower < upper");
        }
        Ok(())
    }

    /// Interval length `delta_N`.
    pub fn interval(&self) -> f64 {
        self.horizon / self.intervals as f64
    }

    /// Integration step `delta_N / substeps`.
    pub fn step(&self) -> f64 {
        self.interval() / self.substeps as f64
    }

    pub fn q_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.q))
    }
}

/// `y^T Q y + R u^2`.
pub fn stage_cost(y: &Vector3<f64>, u: f64, q: &[f64; 3], r: f64) -> f64 {
    q[0] * y[0] * y[0] + q[1] * y[1] * y[1] + q[2] * y[2] * y[2] + r * u * u
}

/// Gradients `(dl/dx, dl/du)` of the stage cost through the output map.
pub fn cost_gradients<M: Dynamics>(model: &M, x: &Vector3<f64>, u: f64, config: &OcpConfig) -> Result<(Vector3<f64>, f64)> {
    let lin = model.linearize(x, u)?;
    let qy = lin.y.component_mul(&Vector3::from(config.q));
    Ok((lin.c_y.transpose() * qy * 2.0, 2.0 * config.r * u))
}

/// Continuous-time Jacobians `(A, B)` of the scaled dynamics.
pub fn dynamics_jacobians<M: Dynamics>(model: &M, x: &Vector3<f64>, u: f64) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    let lin = model.linearize(x, u)?;
    Ok((lin.a, lin.b))
}

/// Clamps a scaled input to the admissible box.
#[inline]
pub fn project_input(u: f64, config: &OcpConfig) -> f64 {
    u.clamp(config.u_lower, config.u_upper)
}

/// One RK4 step with the cost quadrature; no derivatives.
pub fn rk4_cost_step<M: Dynamics>(model: &M, config: &OcpConfig, x: &Vector3<f64>, u: f64, h: f64) -> Result<(Vector3<f64>, f64)> {
    let mut xs = *x;
    let mut next = *x;
    let mut cost = 0.0;
    let offsets = [0.0, 0.5 * h, 0.5 * h, h];
    let mut k_prev = Vector3::zeros();
    for (i, (&w, &c)) in RK4_WEIGHTS.iter().zip(offsets.iter()).enumerate() {
        if i > 0 {
            xs = x + k_prev * c;
        }
        let (k, y) = model.eval(&xs, u)?;
        cost += w * h * stage_cost(&y, u, &config.q, config.r);
        next += k * (w * h);
        k_prev = k;
    }
    Ok((next, cost))
}

/// Interval map `F(x, u)` over `delta_N` with its accumulated cost.
pub fn interval_map<M: Dynamics>(model: &M, config: &OcpConfig, x: &Vector3<f64>, u: f64) -> Result<(Vector3<f64>, f64)> {
    let h = config.step();
    let mut state = *x;
    let mut cost = 0.0;
    for _ in 0..config.substeps {
        let (next, c) = rk4_cost_step(model, config, &state, u, h)?;
        state = next;
        cost += c;
    }
    Ok((state, cost))
}

/// Interval map with exact forward sensitivities through the RK4 stages and
/// the Gauss-Newton model of the interval cost.
#[derive(Debug, Clone, Copy)]
pub struct IntervalSensitivity {
    pub x_next: Vector3<f64>,
    pub cost: f64,
    /// `dF/dx`.
    pub a: Matrix3<f64>,
    /// `dF/du`.
    pub b: Vector3<f64>,
    /// Gauss-Newton Hessian block of the cost over `(x, u)`, i.e. `J^T J` of
    /// the weighted residuals. The cost model is
    /// `cost + 2 grad^T d + d^T gram d` for a step `d = (dx, du)`.
    pub gram: Matrix4<f64>,
    /// `J^T r`; half the exact cost gradient.
    pub grad: Vector4<f64>,
}

pub fn interval_sensitivity<M: Dynamics>(model: &M, config: &OcpConfig, x: &Vector3<f64>, u: f64) -> Result<IntervalSensitivity> {
    let h = config.step();
    let q = Vector3::from(config.q);
    let qm = config.q_matrix();
    let offsets = [0.0, 0.5, 0.5, 1.0];

    let mut state = *x;
    // d state / d (x0, u): 3x4 stored as (Matrix3, Vector3)
    let mut sx = Matrix3::identity();
    let mut su = Vector3::zeros();
    let mut gram = Matrix4::zeros();
    let mut grad = Vector4::zeros();
    let mut cost = 0.0;

    for _ in 0..config.substeps {
        let mut next = state;
        let mut next_sx = sx;
        let mut next_su = su;
        let mut k_prev = Vector3::zeros();
        let mut dk_prev_x = Matrix3::zeros();
        let mut dk_prev_u = Vector3::zeros();
        for i in 0..4 {
            let c = offsets[i] * h;
            let (xs, dxs_x, dxs_u) = if i == 0 {
                (state, sx, su)
            } else {
                (state + k_prev * c, sx + dk_prev_x * c, su + dk_prev_u * c)
            };
            let lin = model.linearize(&xs, u)?;
            let dk_x = lin.a * dxs_x;
            let dk_u = lin.a * dxs_u + lin.b;

            let w = RK4_WEIGHTS[i] * h;
            next += lin.f * w;
            next_sx += dk_x * w;
            next_su += dk_u * w;

            // residual Jacobian of y w.r.t. (x0, u)
            let jy_x = lin.c_y * dxs_x;
            let jy_u = lin.c_y * dxs_u;
            let qy = lin.y.component_mul(&q);
            cost += w * stage_cost(&lin.y, u, &config.q, config.r);
            let qjx = qm * jy_x;
            let qju = qm * jy_u;
            let mut blk = Matrix4::zeros();
            blk.fixed_view_mut::<3, 3>(0, 0).copy_from(&(jy_x.transpose() * qjx));
            let xu = jy_x.transpose() * qju;
            blk.fixed_view_mut::<3, 1>(0, 3).copy_from(&xu);
            blk.fixed_view_mut::<1, 3>(3, 0).copy_from(&xu.transpose());
            blk[(3, 3)] = jy_u.dot(&qju) + config.r;
            gram += blk * w;
            let gx = jy_x.transpose() * qy;
            grad += Vector4::new(gx[0], gx[1], gx[2], jy_u.dot(&qy) + config.r * u) * w;

            k_prev = lin.f;
            dk_prev_x = dk_x;
            dk_prev_u = dk_u;
        }
        state = next;
        sx = next_sx;
        su = next_su;
    }
    Ok(IntervalSensitivity {
        x_next: state,
        cost,
        a: sx,
        b: su,
        gram,
        grad,
    })
}
