//! Air-gap velocity reconstruction from the gap and acceleration sensors.
//!
//! A first-order complementary pair at crossover `omega_c`: the low-pass path
//! filters the differenced gap, the high-pass path filters the integrated
//! acceleration. Both filters use the bilinear transform, which makes the two
//! paths sum to one exactly. Gap and current are measured directly.

use crate::error::{Error, Result};
use crate::synthesis::{Equilibrium, SynthState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorMode {
    /// The simulator's true state is passed through.
    Ideal,
    Filtered,
}

impl std::str::FromStr for EstimatorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ideal" => Ok(Self::Ideal),
            "filtered" => Ok(Self::Filtered),
            other => Err(Error::InvalidParameter(format!("unknown estimator mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorConfig {
    pub mode: EstimatorMode,
    /// Crossover frequency [rad/s].
    pub omega_c: f64,
    /// Sampling period [s].
    pub delta: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            mode: EstimatorMode::Ideal,
            omega_c: 50.0,
            delta: 1e-3,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega_c > 0.0 && self.delta > 0.0) {
            return Err(Error::InvalidParameter("estimator omega_c and delta must be positive".into()));
        }
        if self.omega_c * self.delta >= 2.0 {
            return Err(Error::InvalidParameter("estimator needs omega_c * delta < 2".into()));
        }
        Ok(())
    }

    /// Leak rate of the acceleration integrator.
    pub fn leak(&self) -> f64 {
        1e-3 * self.omega_c
    }
}

/// Coefficients of `y_k = pole y_{k-1} + n0 x_k + n1 x_{k-1}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstOrder {
    pub pole: f64,
    pub n0: f64,
    pub n1: f64,
}

impl FirstOrder {
    /// Bilinear transform of `omega / (s + omega)`.
    pub fn low_pass(omega: f64, delta: f64) -> Self {
        let d = 2.0 + omega * delta;
        Self {
            pole: (2.0 - omega * delta) / d,
            n0: omega * delta / d,
            n1: omega * delta / d,
        }
    }

    /// Bilinear transform of `s / (s + omega)`.
    pub fn high_pass(omega: f64, delta: f64) -> Self {
        let d = 2.0 + omega * delta;
        Self {
            pole: (2.0 - omega * delta) / d,
            n0: 2.0 / d,
            n1: -2.0 / d,
        }
    }

    /// Bilinear transform of `1 / (s + leak)`.
    pub fn leaky_integrator(leak: f64, delta: f64) -> Self {
        let d = 2.0 + leak * delta;
        Self {
            pole: (2.0 - leak * delta) / d,
            n0: delta / d,
            n1: delta / d,
        }
    }

    #[inline]
    pub fn apply(&self, y_prev: f64, x: f64, x_prev: f64) -> f64 {
        self.pole * y_prev + self.n0 * x + self.n1 * x_prev
    }
}

/// Internal filter memory; all zero after [`reset`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FilterState {
    /// Previous gap deviation.
    pub ds_prev: f64,
    /// Low-pass input/output (differenced gap).
    pub diff_prev: f64,
    pub lp_out: f64,
    /// Integrator input/output (acceleration).
    pub acc_prev: f64,
    pub int_out: f64,
    /// High-pass output.
    pub hp_out: f64,
    /// The first update only primes the differencer.
    pub primed: bool,
}

impl FilterState {
    pub fn is_finite(&self) -> bool {
        [self.ds_prev, self.diff_prev, self.lp_out, self.acc_prev, self.int_out, self.hp_out]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub fn reset(_config: &EstimatorConfig) -> FilterState {
    FilterState::default()
}

/// One filter update at the sampling instant. `zdd_meas` is positive
/// downwards like the vertical coordinate.
pub fn estimator_update(fs: FilterState, s_meas: f64, zdd_meas: f64, current_meas: f64, eq: &Equilibrium, config: &EstimatorConfig) -> (SynthState, FilterState) {
    let ds = s_meas - eq.s0;
    let di = current_meas - eq.i0;
    let lp = FirstOrder::low_pass(config.omega_c, config.delta);
    let hp = FirstOrder::high_pass(config.omega_c, config.delta);
    let int = FirstOrder::leaky_integrator(config.leak(), config.delta);

    let diff = if fs.primed { (ds - fs.ds_prev) / config.delta } else { 0.0 };
    let lp_out = lp.apply(fs.lp_out, diff, fs.diff_prev);
    let int_out = int.apply(fs.int_out, zdd_meas, fs.acc_prev);
    let hp_out = hp.apply(fs.hp_out, int_out, fs.int_out);
    let next = FilterState {
        ds_prev: ds,
        diff_prev: diff,
        lp_out,
        acc_prev: zdd_meas,
        int_out,
        hp_out,
        primed: true,
    };
    (
        SynthState {
            ds,
            sdot: lp_out + hp_out,
            di,
        },
        next,
    )
}

/// Stateful wrapper around [`estimator_update`].
#[derive(Debug, Clone)]
pub struct Estimator {
    pub config: EstimatorConfig,
    state: FilterState,
}

impl Estimator {
    pub fn new(config: EstimatorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state: reset(&config),
        })
    }

    pub fn reset(&mut self) {
        self.state = reset(&self.config);
    }

    pub fn filter_state(&self) -> &FilterState {
        &self.state
    }

    /// Filtered estimate; in ideal mode `truth` is returned instead (the
    /// filters still run so switching modes is seamless).
    pub fn update(&mut self, s_meas: f64, zdd_meas: f64, current_meas: f64, eq: &Equilibrium, truth: &SynthState) -> SynthState {
        let (x, next) = estimator_update(self.state, s_meas, zdd_meas, current_meas, eq, &self.config);
        self.state = next;
        match self.config.mode {
            EstimatorMode::Ideal => *truth,
            EstimatorMode::Filtered => x,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn eq() -> Equilibrium {
        Equilibrium {
            s0: 0.01,
            i0: 24.0,
            u0: 96.0,
        }
    }

    fn cfg() -> EstimatorConfig {
        EstimatorConfig {
            mode: EstimatorMode::Filtered,
            ..EstimatorConfig::default()
        }
    }

    #[test]
    fn paths_are_complementary() {
        for (w, d) in [(50.0, 1e-3), (10.0, 1e-4), (300.0, 5e-3)] {
            let lp = FirstOrder::low_pass(w, d);
            let hp = FirstOrder::high_pass(w, d);
            assert_eq!(lp.pole, hp.pole);
            assert!((lp.n0 + hp.n0 - 1.0).abs() < 1e-15);
            assert!((lp.n1 + hp.n1 + lp.pole).abs() < 1e-15);
        }
    }

    #[test]
    fn equilibrium_measurements_give_zero() {
        let c = cfg();
        let mut fs = reset(&c);
        for _ in 0..10 {
            let (x, next) = estimator_update(fs, 0.01, 0.0, 24.0, &eq(), &c);
            assert_eq!((x.ds, x.sdot, x.di), (0.0, 0.0, 0.0));
            fs = next;
        }
    }

    #[test]
    fn reset_clears_state() {
        let c = cfg();
        let (_, fs) = estimator_update(reset(&c), 0.012, 3.0, 25.0, &eq(), &c);
        let (_, fs) = estimator_update(fs, 0.013, 3.0, 25.0, &eq(), &c);
        assert_ne!(fs, reset(&c));
        let mut est = Estimator::new(c).unwrap();
        est.update(0.012, 1.0, 24.0, &eq(), &SynthState::default());
        est.reset();
        assert_eq!(*est.filter_state(), reset(&c));
        assert_eq!(reset(&c), reset(&c));
    }

    #[test]
    fn constant_offset_decays_to_zero_velocity() {
        let c = cfg();
        let mut fs = reset(&c);
        let mut last = f64::INFINITY;
        for k in 0..500 {
            let s = if k == 0 { 0.01 } else { 0.011 };
            let (x, next) = estimator_update(fs, s, 0.0, 24.0, &eq(), &c);
            fs = next;
            if k > 2 {
                assert!(x.sdot.abs() <= last);
            }
            last = x.sdot.abs();
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn ramp_is_tracked() {
        let c = cfg();
        let v = 0.05;
        let mut fs = reset(&c);
        let steps = (5.0 / c.omega_c / c.delta).ceil() as usize;
        let mut x = SynthState::default();
        for k in 0..=steps {
            let (xe, next) = estimator_update(fs, 0.01 + v * k as f64 * c.delta, 0.0, 24.0, &eq(), &c);
            fs = next;
            x = xe;
        }
        assert!((x.sdot - v).abs() < 0.02 * v, "{}", x.sdot);
    }

    // Steady-state amplitude of the estimate for s = A sin(w t), zdd = -A w^2 sin(w t).
    fn sinusoid_gain(w: f64, use_gap: bool, use_acc: bool) -> f64 {
        let c = cfg();
        let a = 1e-4;
        let mut fs = reset(&c);
        let n = 40_000;
        let mut peak: f64 = 0.0;
        for k in 0..n {
            let t = k as f64 * c.delta;
            let s = if use_gap { 0.01 + a * (w * t).sin() } else { 0.01 };
            // gap grows when the magnet moves down, so zdd has the same sign
            let zdd = if use_acc { -a * w * w * (w * t).sin() } else { 0.0 };
            let (x, next) = estimator_update(fs, s, zdd, 24.0, &eq(), &c);
            fs = next;
            if k > n / 2 {
                peak = peak.max(x.sdot.abs());
            }
        }
        peak / (a * w)
    }

    #[test]
    fn low_frequencies_come_from_the_gap_and_high_from_acceleration() {
        assert!((sinusoid_gain(2.0, true, false) - 1.0).abs() < 0.01);
        assert!(sinusoid_gain(2.0, false, true) < 0.05);
        assert!(sinusoid_gain(400.0, true, false) < 0.2);
        assert!((sinusoid_gain(400.0, false, true) - 1.0).abs() < 0.05);
        assert!((sinusoid_gain(50.0, true, true) - 1.0).abs() < 0.05);
    }

    #[test]
    fn ideal_mode_passes_truth() {
        let mut est = Estimator::new(EstimatorConfig::default()).unwrap();
        let truth = SynthState {
            ds: 1e-3,
            sdot: 0.2,
            di: -1.0,
        };
        assert_eq!(est.update(0.02, 5.0, 30.0, &eq(), &truth), truth);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut c = cfg();
        c.omega_c = 3000.0;
        assert!(c.validate().is_err());
        c.omega_c = -1.0;
        assert!(Estimator::new(c).is_err());
    }

    proptest! {
        #[test]
        fn gap_and_current_pass_through(s in 0.005f64..0.02, i in 1.0f64..40.0, zdd in -50.0f64..50.0) {
            let c = cfg();
            let (x, fs) = estimator_update(reset(&c), s, zdd, i, &eq(), &c);
            prop_assert_eq!(x.ds, s - 0.01);
            prop_assert_eq!(x.di, i - 24.0);
            prop_assert!(fs.is_finite());
        }
    }
}
