//! Control-oriented model in shifted coordinates.
//!
//! The controller works with `x = [ds, sdot, dI]` and input `u = dU`, where
//! `s = s0 + ds`, `I = I0 + dI`, `U = U0 + dU`. The guideway deflection is
//! taken as zero and the load force is replaced by an integral estimate, so the
//! origin is an equilibrium whenever the estimate equals the nominal load.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::plant::{self, MagnetModel, MagnetPartials, PlantParams};

/// Operating point `(s0, I0, U0)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Equilibrium {
    pub s0: f64,
    pub i0: f64,
    pub u0: f64,
}

/// Shifted state `[ds, sdot, dI]` in SI units.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SynthState {
    pub ds: f64,
    pub sdot: f64,
    pub di: f64,
}

impl SynthState {
    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.ds, self.sdot, self.di)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self {
            ds: v[0],
            sdot: v[1],
            di: v[2],
        }
    }
}

/// Diagonal linear scaling applied to every OCP quantity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingConfig {
    /// Units of `ds` [m], `sdot` [m/s], `dI` [A].
    pub state: [f64; 3],
    /// Units of `dU` [V].
    pub input: f64,
    /// Units of the output deviations `s - s0` [m], `zdd` [m/s^2], `I - I0` [A].
    pub output: [f64; 3],
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            state: [1e-2, 1e-1, 10.0],
            input: 100.0,
            output: [1e-2, 9.81, 10.0],
        }
    }
}

impl ScalingConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.state.iter().chain(self.output.iter()).all(|&v| v > 0.0 && v.is_finite())
            && self.input > 0.0
            && self.input.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter("scale factors must be strictly positive".into()))
        }
    }

    pub fn scale_state(&self, x: &SynthState) -> Vector3<f64> {
        Vector3::new(x.ds / self.state[0], x.sdot / self.state[1], x.di / self.state[2])
    }

    pub fn unscale_state(&self, x: &Vector3<f64>) -> SynthState {
        SynthState {
            ds: x[0] * self.state[0],
            sdot: x[1] * self.state[1],
            di: x[2] * self.state[2],
        }
    }

    pub fn scale_input(&self, u: f64) -> f64 {
        u / self.input
    }

    pub fn unscale_input(&self, u: f64) -> f64 {
        u * self.input
    }

    pub fn scale_output(&self, y: &Vector3<f64>) -> Vector3<f64> {
        y.component_div(&Vector3::from(self.output))
    }

    pub fn unscale_output(&self, y: &Vector3<f64>) -> Vector3<f64> {
        y.component_mul(&Vector3::from(self.output))
    }
}

/// Integral load-force estimator, `d_hat = k_s * integral(s - s0)`.
///
/// The accumulator is clamped so that `|d_hat| <= limit`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadEstimator {
    pub gain: f64,
    pub limit: f64,
    accumulator: f64,
}

impl LoadEstimator {
    pub fn new(gain: f64, limit: f64) -> Self {
        Self {
            gain,
            limit,
            accumulator: 0.0,
        }
    }

    /// Estimator with the default anti-windup limit `0.5 m g`.
    pub fn with_default_limit(gain: f64, params: &PlantParams) -> Self {
        Self::new(gain, 0.5 * params.mass * params.gravity)
    }

    pub fn accumulator(&self) -> f64 {
        self.accumulator
    }

    pub fn estimate(&self) -> f64 {
        self.gain * self.accumulator
    }

    /// Explicit Euler step of the integral over one sampling period.
    #[must_use]
    pub fn update(self, s_meas: f64, s0: f64, delta: f64) -> Self {
        let mut acc = self.accumulator + (s_meas - s0) * delta;
        if self.gain != 0.0 {
            let bound = (self.limit / self.gain).abs();
            acc = acc.clamp(-bound, bound);
        }
        Self {
            accumulator: acc,
            ..self
        }
    }
}

/// See [`LoadEstimator::update`].
pub fn load_estimator_update(est: LoadEstimator, s_meas: f64, s0: f64, delta: f64) -> LoadEstimator {
    est.update(s_meas, s0, delta)
}

/// Synthesis model around a fixed equilibrium.
#[derive(Debug, Clone)]
pub struct SynthesisModel {
    pub params: PlantParams,
    pub magnet: MagnetModel,
    pub eq: Equilibrium,
    equilibrium_force: f64,
}

impl SynthesisModel {
    pub fn new(params: PlantParams, magnet: MagnetModel, s0: f64) -> Result<Self> {
        params.validate()?;
        let eq = plant::equilibrium(&params, &magnet, s0)?;
        Self::with_equilibrium(params, magnet, eq)
    }

    pub fn with_equilibrium(params: PlantParams, magnet: MagnetModel, eq: Equilibrium) -> Result<Self> {
        let equilibrium_force = magnet.force(eq.s0, eq.i0)?;
        Ok(Self {
            params,
            magnet,
            eq,
            equilibrium_force,
        })
    }

    /// Acceleration `g + (F_hat - F_mag) / m`, written relative to the
    /// equilibrium force so it vanishes exactly at the origin.
    #[inline]
    fn accel(&self, force: f64, load_estimate: f64) -> f64 {
        ((load_estimate - self.params.load_force) - (force - self.equilibrium_force)) / self.params.mass
    }

    /// Time derivative of the shifted state (SI units).
    pub fn deriv(&self, x: &SynthState, u: f64, load_estimate: f64) -> Result<SynthState> {
        let s = self.eq.s0 + x.ds;
        let current = self.eq.i0 + x.di;
        let force = self.magnet.force(s, current)?;
        let rate = self
            .magnet
            .current_rate(s, x.sdot, current, self.eq.u0 + u)?;
        Ok(SynthState {
            ds: x.sdot,
            sdot: self.accel(force, load_estimate),
            di: rate,
        })
    }

    /// Outputs `(s, zdd, I)` in absolute units.
    pub fn output(&self, x: &SynthState, load_estimate: f64) -> Result<Vector3<f64>> {
        let s = self.eq.s0 + x.ds;
        let current = self.eq.i0 + x.di;
        let force = self.magnet.force(s, current)?;
        Ok(Vector3::new(s, self.accel(force, load_estimate), current))
    }

    /// Partial derivatives of the magnet maps at the shifted point.
    pub(crate) fn partials(&self, x: &SynthState, u: f64) -> Result<MagnetPartials> {
        self.magnet.partials(
            self.eq.s0 + x.ds,
            x.sdot,
            self.eq.i0 + x.di,
            self.eq.u0 + u,
        )
    }

    pub(crate) fn accel_from_force(&self, force: f64, load_estimate: f64) -> f64 {
        self.accel(force, load_estimate)
    }
}

/// See [`SynthesisModel::deriv`].
pub fn synth_deriv(model: &SynthesisModel, x: &SynthState, u: f64, load_estimate: f64) -> Result<SynthState> {
    model.deriv(x, u, load_estimate)
}

/// See [`SynthesisModel::output`].
pub fn synth_output(model: &SynthesisModel, x: &SynthState, load_estimate: f64) -> Result<Vector3<f64>> {
    model.output(x, load_estimate)
}
