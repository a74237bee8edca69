//! Closed-loop simulation: guideway disturbances, the sampled control loop,
//! evaluation metrics and region-of-attraction sweeps.

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::estimator::{Estimator, EstimatorConfig};
use crate::gpm::{GpmController, GpmSettings};
use crate::lqr::LqrController;
use crate::ocp::{stage_cost, ControlModel, OcpConfig};
use crate::plant::{equilibrium, DisturbanceSample, GapWindow, MagnetModel, Plant, PlantParams, PlantState};
use crate::shooting::{sqp_solve, RtiSolver, ShootingIterate, SolveStatus, SqpSettings};
use crate::synthesis::{Equilibrium, LoadEstimator, ScalingConfig, SynthState, SynthesisModel};

/// Girder passing frequency `f = v / lambda` for `v` in km/h.
pub fn girder_frequency(velocity_kmh: f64, girder_length: f64) -> f64 {
    velocity_kmh / 3.6 / girder_length
}

/// `a |sin(pi f t)|` and its time derivative. At the girder joints the
/// right derivative is returned.
pub fn guideway_approx(t: f64, velocity_kmh: f64, girder_length: f64, amplitude: f64) -> (f64, f64) {
    let f = girder_frequency(velocity_kmh, girder_length);
    let phase = PI * f * t;
    let s = phase.sin();
    let sign = if s < 0.0 { -1.0 } else { 1.0 };
    (amplitude * s.abs(), amplitude * PI * f * phase.cos() * sign)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidewayKind {
    None,
    Approx,
    Realistic,
}

impl std::str::FromStr for GuidewayKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "approx" => Ok(Self::Approx),
            "realistic" => Ok(Self::Realistic),
            other => Err(Error::InvalidParameter(format!("unknown guideway kind `{other}`"))),
        }
    }
}

/// Guideway deflection model. Lengths in metres.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidewayModel {
    pub kind: GuidewayKind,
    pub girder_length: f64,
    /// Bending amplitude.
    pub amplitude: f64,
    /// Standard deviation of the pillar offsets.
    pub offset_std: f64,
    pub unevenness_amplitude: f64,
    pub unevenness_wavelength: f64,
    /// Length over which neighbouring girder offsets are blended.
    pub ramp_length: f64,
    pub seed: u64,
}

impl Default for GuidewayModel {
    fn default() -> Self {
        Self {
            kind: GuidewayKind::Realistic,
            girder_length: 24.768,
            amplitude: 1e-3,
            offset_std: 0.5e-3,
            unevenness_amplitude: 0.2e-3,
            unevenness_wavelength: 3.1,
            ramp_length: 0.3,
            seed: 0,
        }
    }
}

impl GuidewayModel {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if !(self.girder_length > 0.0) {
            return bad("girder length must be positive");
        }
        if !(self.amplitude >= 0.0 && self.offset_std >= 0.0 && self.unevenness_amplitude >= 0.0) {
            return bad("guideway amplitudes must be non-negative");
        }
        if !(self.unevenness_wavelength > 0.0) {
            return bad("unevenness wavelength must be positive");
        }
        if !(self.ramp_length > 0.0 && self.ramp_length < self.girder_length) {
            return bad("ramp length must lie in (0, girder length)");
        }
        Ok(())
    }

    /// Offset of girder `index`, drawn from its own random stream.
    pub fn girder_offset(&self, index: i64) -> f64 {
        if self.offset_std == 0.0 {
            return 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let z: f64 = rng.sample(StandardNormal);
        self.offset_std * z
    }

    /// Deflection and its time derivative at time `t` for velocity in km/h.
    pub fn sample(&self, t: f64, velocity_kmh: f64) -> (f64, f64) {
        match self.kind {
            GuidewayKind::None => (0.0, 0.0),
            GuidewayKind::Approx => guideway_approx(t, velocity_kmh, self.girder_length, self.amplitude),
            GuidewayKind::Realistic => guideway_realistic(t, velocity_kmh, self),
        }
    }
}

/// Per-girder bending bump, pillar offsets blended with a smoothstep ramp
/// centred on each joint, and a sinusoidal unevenness.
pub fn guideway_realistic(t: f64, velocity_kmh: f64, model: &GuidewayModel) -> (f64, f64) {
    let v = velocity_kmh / 3.6;
    let x = v * t;
    let lambda = model.girder_length;
    let (bend, bend_dx) = guideway_approx(x, 3.6, lambda, model.amplitude);

    // nearest joint and the position relative to it
    let joint = (x / lambda).round();
    let rel = x - joint * lambda;
    let half = 0.5 * model.ramp_length;
    let index = joint as i64;
    let (offset, offset_dx) = if rel.abs() < half {
        let before = model.girder_offset(index - 1);
        let after = model.girder_offset(index);
        let r = (rel + half) / model.ramp_length;
        let w = r * r * (3.0 - 2.0 * r);
        let dw = 6.0 * r * (1.0 - r) / model.ramp_length;
        (before + (after - before) * w, (after - before) * dw)
    } else {
        let girder = if rel >= 0.0 { index } else { index - 1 };
        (model.girder_offset(girder), 0.0)
    };

    let k = 2.0 * PI / model.unevenness_wavelength;
    let (une, une_dx) = if model.unevenness_amplitude == 0.0 {
        (0.0, 0.0)
    } else {
        (model.unevenness_amplitude * (k * x).sin(), model.unevenness_amplitude * k * (k * x).cos())
    };
    (bend + offset + une, v * (bend_dx + offset_dx + une_dx))
}

/// Additional load force switched on at `time`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LoadStep {
    /// Force [N], positive downwards.
    pub force: f64,
    pub time: f64,
}

impl LoadStep {
    pub fn at(&self, t: f64) -> f64 {
        if self.force != 0.0 && t >= self.time {
            self.force
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerKind {
    /// Fully converged SQP at every sampling instant.
    MpcShooting,
    /// One SQP iteration per sampling instant.
    MpcRti,
    /// Gradient projection method with the configured budget.
    MpcGpm,
    Lqr,
}

impl ControllerKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::MpcShooting => "mpc-shooting",
            Self::MpcRti => "mpc-rti",
            Self::MpcGpm => "mpc-gpm",
            Self::Lqr => "lqr",
        }
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mpc-shooting" => Ok(Self::MpcShooting),
            "mpc-rti" => Ok(Self::MpcRti),
            "mpc-gpm" => Ok(Self::MpcGpm),
            "lqr" => Ok(Self::Lqr),
            other => Err(Error::InvalidParameter(format!("unknown controller `{other}`"))),
        }
    }
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Load estimator settings; a zero gain disables it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadEstimatorConfig {
    /// Integral gain `k_s` [N/(m s)].
    pub gain: f64,
    /// Anti-windup limit on the estimate [N].
    pub limit: f64,
}

/// Everything needed for one closed-loop run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub params: PlantParams,
    pub magnet: MagnetModel,
    /// Gap range the controller's prediction model accepts. Wider than the
    /// plant window so predictions may pass the divergence limits.
    pub prediction_window: GapWindow,
    /// Nominal air gap [m].
    pub s0: f64,
    pub scaling: ScalingConfig,
    pub ocp: OcpConfig,
    pub sqp: SqpSettings,
    pub gpm: GpmSettings,
    pub controller: ControllerKind,
    /// Vehicle velocity [km/h].
    pub velocity: f64,
    /// Simulated time [s].
    pub duration: f64,
    /// Sampling period [s].
    pub delta: f64,
    /// RK4 steps of the plant per sampling period.
    pub plant_substeps: usize,
    pub estimator: EstimatorConfig,
    pub load_estimator: LoadEstimatorConfig,
    pub guideway: GuidewayModel,
    pub load_step: LoadStep,
    /// Measurement noise standard deviations for `(s, zdd, I)`.
    pub noise: [f64; 3],
    pub seed: u64,
    /// Initial offset from the equilibrium (SI units).
    pub initial: SynthState,
}

impl Scenario {
    /// Default scenario: analytic magnet, converged shooting MPC, 430 km/h on
    /// the realistic guideway, ideal state measurement.
    pub fn new(params: PlantParams) -> Result<Self> {
        let magnet = MagnetModel::analytic(&params);
        let s0 = 0.010;
        let scaling = ScalingConfig::default();
        let model = ControlModel::new(SynthesisModel::new(params.clone(), magnet.clone(), s0)?, scaling.clone())?;
        let ocp = OcpConfig::new(&model);
        let gpm = GpmSettings::converged(&ocp);
        let limit = 0.5 * params.mass * params.gravity;
        let prediction_window = GapWindow {
            lo: 0.5 * params.gap_min,
            hi: 2.0 * params.gap_max,
        };
        Ok(Self {
            params,
            magnet,
            prediction_window,
            s0,
            scaling,
            ocp,
            sqp: SqpSettings::default(),
            gpm,
            controller: ControllerKind::MpcShooting,
            velocity: 430.0,
            duration: 2.0,
            delta: 1e-3,
            plant_substeps: 10,
            estimator: EstimatorConfig::default(),
            load_estimator: LoadEstimatorConfig { gain: 1e6, limit },
            guideway: GuidewayModel::default(),
            load_step: LoadStep::default(),
            noise: [0.0; 3],
            seed: 0,
            initial: SynthState::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        self.params.validate()?;
        self.scaling.validate()?;
        self.ocp.validate()?;
        self.guideway.validate()?;
        let w = self.prediction_window;
        if !(w.lo > 0.0 && w.lo < w.hi) {
            return bad("prediction window must satisfy 0 < lo < hi".into());
        }
        if self.controller == ControllerKind::MpcGpm {
            self.gpm.validate()?;
        }
        if !(self.delta > 0.0) {
            return bad("sampling period must be positive".into());
        }
        if !(self.duration > 0.0) {
            return bad("duration must be positive".into());
        }
        if self.plant_substeps == 0 {
            return bad("plant substeps must be at least 1".into());
        }
        if !(self.velocity >= 0.0) {
            return bad("velocity must be non-negative".into());
        }
        if self.noise.iter().any(|s| !(*s >= 0.0)) {
            return bad("noise standard deviations must be non-negative".into());
        }
        if !(self.load_estimator.gain >= 0.0 && self.load_estimator.limit >= 0.0) {
            return bad("load estimator gain and limit must be non-negative".into());
        }
        let mut est = self.estimator;
        est.delta = self.delta;
        est.validate()?;
        Ok(())
    }

    pub fn equilibrium(&self) -> Result<Equilibrium> {
        equilibrium(&self.params, &self.magnet, self.s0)
    }

    /// Scaled controller model with input bounds applied to the OCP.
    pub fn control_model(&self) -> Result<ControlModel> {
        let syn = SynthesisModel::new(self.params.clone(), self.magnet.with_window(self.prediction_window), self.s0)?;
        ControlModel::new(syn, self.scaling.clone())
    }

    /// OCP with the input box recomputed from the voltage bounds.
    pub fn ocp_config(&self, model: &ControlModel) -> OcpConfig {
        let mut cfg = self.ocp.clone();
        let (lo, hi) = model.input_bounds();
        cfg.u_lower = lo;
        cfg.u_upper = hi;
        cfg
    }

    /// Number of sampling instants.
    pub fn steps(&self) -> usize {
        (self.duration / self.delta).round() as usize
    }
}

/// One controller evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ControlStep {
    /// Scaled input deviation.
    pub u: f64,
    pub status: Option<SolveStatus>,
    pub iterations: usize,
    /// Wall time [s].
    pub wall_time: f64,
}

/// A sampled-data state-feedback law on the scaled shifted state.
pub trait Controller {
    fn step(&mut self, x_hat: &Vector3<f64>, load_estimate: f64) -> ControlStep;
    fn reset(&mut self);
}

pub struct ShootingMpc {
    model: ControlModel,
    config: OcpConfig,
    settings: SqpSettings,
    shift: f64,
    guess: Option<ShootingIterate>,
}

impl ShootingMpc {
    pub fn new(model: ControlModel, config: OcpConfig, settings: SqpSettings, delta: f64) -> Self {
        let shift = delta / config.interval();
        Self {
            model,
            config,
            settings,
            shift,
            guess: None,
        }
    }
}

impl Controller for ShootingMpc {
    fn step(&mut self, x_hat: &Vector3<f64>, load_estimate: f64) -> ControlStep {
        self.model.set_load_estimate(load_estimate);
        let res = sqp_solve(&self.model, &self.config, x_hat, self.guess.as_ref(), &self.settings);
        let failed = matches!(res.status, SolveStatus::DomainError | SolveStatus::QpFailure);
        let it = match self.guess.take() {
            // keep following the last plan rather than a cold iterate
            Some(plan) if failed => plan,
            _ => ShootingIterate {
                states: res.states,
                controls: res.controls,
            },
        };
        let u = it.controls[0];
        self.guess = Some(it.shifted_by(self.shift));
        ControlStep {
            u,
            status: Some(res.status),
            iterations: res.iterations,
            wall_time: res.wall_time,
        }
    }

    fn reset(&mut self) {
        self.guess = None;
    }
}

pub struct RtiMpc {
    model: ControlModel,
    config: OcpConfig,
    solver: RtiSolver,
}

impl RtiMpc {
    pub fn new(model: ControlModel, config: OcpConfig, delta: f64) -> Self {
        Self {
            model,
            config,
            solver: RtiSolver::with_sampling(delta),
        }
    }
}

impl Controller for RtiMpc {
    fn step(&mut self, x_hat: &Vector3<f64>, load_estimate: f64) -> ControlStep {
        self.model.set_load_estimate(load_estimate);
        let out = self.solver.step(&self.model, &self.config, x_hat);
        ControlStep {
            u: out.u_applied,
            status: Some(out.status),
            iterations: 1,
            wall_time: out.wall_time,
        }
    }

    fn reset(&mut self) {
        self.solver.reset();
    }
}

pub struct GpmMpc {
    model: ControlModel,
    config: OcpConfig,
    inner: GpmController,
    delta: f64,
}

impl GpmMpc {
    pub fn new(model: ControlModel, config: OcpConfig, settings: GpmSettings, delta: f64) -> Self {
        Self {
            model,
            config,
            inner: GpmController::new(settings),
            delta,
        }
    }
}

impl Controller for GpmMpc {
    fn step(&mut self, x_hat: &Vector3<f64>, load_estimate: f64) -> ControlStep {
        self.model.set_load_estimate(load_estimate);
        let res = self.inner.step(&self.model, &self.config, x_hat, self.delta);
        ControlStep {
            u: res.controls[0],
            status: Some(res.status),
            iterations: res.iterations,
            wall_time: res.wall_time,
        }
    }

    fn reset(&mut self) {
        self.inner.reset();
    }
}

impl Controller for LqrController {
    fn step(&mut self, x_hat: &Vector3<f64>, _load_estimate: f64) -> ControlStep {
        let start = Instant::now();
        let u = self.control(x_hat);
        ControlStep {
            u,
            status: None,
            iterations: 0,
            wall_time: start.elapsed().as_secs_f64(),
        }
    }

    fn reset(&mut self) {}
}

/// Instantiates the scenario's controller.
pub fn build_controller(scenario: &Scenario) -> Result<Box<dyn Controller + Send>> {
    let model = scenario.control_model()?;
    let config = scenario.ocp_config(&model);
    Ok(match scenario.controller {
        ControllerKind::MpcShooting => Box::new(ShootingMpc::new(model, config, scenario.sqp.clone(), scenario.delta)),
        ControllerKind::MpcRti => Box::new(RtiMpc::new(model, config, scenario.delta)),
        ControllerKind::MpcGpm => {
            let mut settings = scenario.gpm.clone();
            if settings.grid == 0 {
                settings.grid = config.intervals * config.substeps;
            }
            Box::new(GpmMpc::new(model, config, settings, scenario.delta))
        }
        ControllerKind::Lqr => Box::new(LqrController::design(&model, &config, scenario.delta)?),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Verdict {
    Stable,
    /// Time at which the gap left the window.
    Diverged(f64),
}

impl Verdict {
    pub fn is_stable(&self) -> bool {
        matches!(self, Verdict::Stable)
    }
}

/// Uniformly sampled closed-loop record. `u` is the applied voltage
/// deviation from the equilibrium voltage [V].
#[derive(Debug, Clone, Default)]
pub struct SimLog {
    pub time: Vec<f64>,
    pub s: Vec<f64>,
    pub zdd: Vec<f64>,
    pub current: Vec<f64>,
    pub u: Vec<f64>,
    pub load_estimate: Vec<f64>,
    pub d_gw: Vec<f64>,
    pub wall_time: Vec<f64>,
    pub status: Vec<Option<SolveStatus>>,
    pub iterations: Vec<usize>,
    pub verdict: Option<Verdict>,
    pub eq: Equilibrium,
}

impl SimLog {
    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    pub fn verdict(&self) -> Verdict {
        self.verdict.unwrap_or(Verdict::Stable)
    }

    /// Steps whose solver reported a hard failure.
    pub fn solver_failures(&self) -> usize {
        self.status
            .iter()
            .filter(|s| matches!(s, Some(SolveStatus::QpFailure | SolveStatus::DomainError | SolveStatus::CostateDivergence)))
            .count()
    }

    pub fn mean_wall_time(&self) -> f64 {
        if self.wall_time.is_empty() {
            0.0
        } else {
            self.wall_time.iter().sum::<f64>() / self.wall_time.len() as f64
        }
    }

    pub fn max_wall_time(&self) -> f64 {
        self.wall_time.iter().copied().fold(0.0, f64::max)
    }

    /// Gap deviation series `s - s0`.
    pub fn gap_error(&self) -> Vec<f64> {
        self.s.iter().map(|s| s - self.eq.s0).collect()
    }

    fn push(&mut self, t: f64, y: (f64, f64, f64), u: f64, f_hat: f64, d_gw: f64, step: &ControlStep) {
        self.time.push(t);
        self.s.push(y.0);
        self.zdd.push(y.1);
        self.current.push(y.2);
        self.u.push(u);
        self.load_estimate.push(f_hat);
        self.d_gw.push(d_gw);
        self.wall_time.push(step.wall_time);
        self.status.push(step.status);
        self.iterations.push(step.iterations);
    }
}

/// Early termination rule of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SettleExit {
    /// Scaled state magnitude counted as settled.
    pub ball: f64,
    /// Consecutive settled samples required.
    pub samples: usize,
}

/// Runs the scenario to completion or divergence.
pub fn run_closed_loop(scenario: &Scenario) -> Result<SimLog> {
    run_closed_loop_until(scenario, None)
}

/// As [`run_closed_loop`], optionally stopping once the true state has
/// stayed inside a small ball around the equilibrium.
pub fn run_closed_loop_until(scenario: &Scenario, settle: Option<SettleExit>) -> Result<SimLog> {
    scenario.validate()?;
    let eq = scenario.equilibrium()?;
    let plant = Plant::new(scenario.params.clone(), scenario.magnet.clone())?;
    let mut controller = build_controller(scenario)?;
    let mut est_cfg = scenario.estimator;
    est_cfg.delta = scenario.delta;
    let mut estimator = Estimator::new(est_cfg)?;
    let mut load_est = LoadEstimator::new(scenario.load_estimator.gain, scenario.load_estimator.limit);
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let scaling = &scenario.scaling;
    let (u_lo, u_hi) = (scenario.params.u_min, scenario.params.u_max);

    let disturbance = |t: f64| {
        let (d_gw, d_gw_dot) = scenario.guideway.sample(t, scenario.velocity);
        DisturbanceSample {
            d_gw,
            d_gw_dot,
            d_load: scenario.load_step.at(t),
        }
    };

    let d0 = disturbance(0.0);
    let mut state = PlantState {
        z: eq.s0 + scenario.initial.ds + d0.d_gw,
        zdot: scenario.initial.sdot,
        current: eq.i0 + scenario.initial.di,
    };
    let mut log = SimLog {
        eq,
        ..SimLog::default()
    };
    let steps = scenario.steps();
    let h = scenario.delta / scenario.plant_substeps as f64;
    let mut settled = 0usize;
    for k in 0..steps {
        let t = k as f64 * scenario.delta;
        let d = disturbance(t);
        let y = match plant.output(&state, &d) {
            Ok(y) if state.is_finite() => y,
            _ => {
                log.verdict = Some(Verdict::Diverged(t));
                return Ok(log);
            }
        };
        let truth = SynthState {
            ds: y.s - eq.s0,
            sdot: state.zdot - d.d_gw_dot,
            di: y.current - eq.i0,
        };
        if let Some(rule) = settle {
            if scaling.scale_state(&truth).amax() < rule.ball {
                settled += 1;
                if settled >= rule.samples {
                    break;
                }
            } else {
                settled = 0;
            }
        }
        let mut noisy = [y.s, y.zdd, y.current];
        for (v, &sigma) in noisy.iter_mut().zip(&scenario.noise) {
            if sigma > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                *v += sigma * z;
            }
        }
        let x_hat = estimator.update(noisy[0], noisy[1], noisy[2], &eq, &truth);
        if scenario.load_estimator.gain > 0.0 {
            load_est = load_est.update(noisy[0], eq.s0, scenario.delta);
        }
        let f_hat = scenario.params.load_force + load_est.estimate();

        let start = Instant::now();
        let mut step = controller.step(&scaling.scale_state(&x_hat), f_hat);
        step.wall_time = start.elapsed().as_secs_f64();
        let u_raw = if step.u.is_finite() { scaling.unscale_input(step.u) } else { 0.0 };
        let voltage = (eq.u0 + u_raw).clamp(u_lo, u_hi);
        log.push(t, (y.s, y.zdd, y.current), voltage - eq.u0, f_hat, d.d_gw, &step);

        let mut x = state;
        let mut failed = false;
        for j in 0..scenario.plant_substeps {
            match plant.step(&x, voltage, disturbance, t + j as f64 * h, h) {
                Ok(next) if next.is_finite() => x = next,
                _ => {
                    failed = true;
                    break;
                }
            }
        }
        if failed {
            log.verdict = Some(Verdict::Diverged(t + scenario.delta));
            return Ok(log);
        }
        state = x;
    }
    log.verdict = Some(Verdict::Stable);
    Ok(log)
}

/// `sqrt(sum u^2)`.
pub fn l2_norm(series: &[f64]) -> f64 {
    series.iter().map(|u| u * u).sum::<f64>().sqrt()
}

/// Population standard deviation; zero for an empty series.
pub fn std_dev(series: &[f64]) -> f64 {
    if series.is_empty() {
        return 0.0;
    }
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    (series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

pub fn mean(series: &[f64]) -> f64 {
    if series.is_empty() {
        0.0
    } else {
        series.iter().sum::<f64>() / series.len() as f64
    }
}

/// Spread of the samples strictly above and strictly below `nominal`,
/// each measured as the root mean square distance from `nominal`.
/// An empty side yields zero.
pub fn asymmetric_std(series: &[f64], nominal: f64) -> (f64, f64) {
    let side = |pred: &dyn Fn(f64) -> bool| {
        let (sum, n) = series
            .iter()
            .filter(|&&v| pred(v))
            .fold((0.0, 0usize), |(s, n), &v| (s + (v - nominal).powi(2), n + 1));
        if n == 0 {
            0.0
        } else {
            (sum / n as f64).sqrt()
        }
    };
    (side(&|v| v > nominal), side(&|v| v < nominal))
}

/// Accumulated stage cost of a log, evaluated on the scaled output and input
/// deviations.
pub fn accumulated_cost(log: &SimLog, q: &[f64; 3], r: f64, scaling: &ScalingConfig) -> f64 {
    (0..log.len())
        .map(|k| {
            let y = scaling.scale_output(&Vector3::new(log.s[k] - log.eq.s0, log.zdd[k], log.current[k] - log.eq.i0));
            stage_cost(&y, scaling.scale_input(log.u[k]), q, r)
        })
        .sum()
}

/// Relative cumulative suboptimality `|J_test - J_ref| / J_ref`.
pub fn rcso(test: &SimLog, reference: &SimLog, q: &[f64; 3], r: f64, scaling: &ScalingConfig) -> Result<f64> {
    if test.len() != reference.len() {
        return Err(Error::InvalidParameter(format!(
            "logs differ in length ({} vs {})",
            test.len(),
            reference.len()
        )));
    }
    let j_ref = accumulated_cost(reference, q, r, scaling);
    if !(j_ref > 0.0) {
        return Err(Error::UndefinedMetric("reference cost is zero"));
    }
    let j_test = accumulated_cost(test, q, r, scaling);
    Ok((j_test - j_ref).abs() / j_ref)
}

/// Verdict thresholds of the region-of-attraction sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoaSettings {
    /// Simulated time [s].
    pub settle_time: f64,
    /// Final gap tolerance as a fraction of `s0`.
    pub tolerance: f64,
    /// Early exit once the scaled state stays below this for 50 samples.
    pub exit_ball: Option<f64>,
}

impl Default for RoaSettings {
    fn default() -> Self {
        Self {
            settle_time: 2.0,
            tolerance: 0.01,
            exit_ball: Some(1e-4),
        }
    }
}

/// Whether the closed loop returns from the initial offset `(ds, sdot)`.
///
/// The run uses ideal state measurement, no disturbances and no load
/// estimation regardless of `base`.
pub fn roa_point(base: &Scenario, ds: f64, sdot: f64, settings: &RoaSettings) -> Result<bool> {
    let mut sc = base.clone();
    sc.duration = settings.settle_time;
    sc.initial = SynthState { ds, sdot, di: 0.0 };
    sc.guideway.kind = GuidewayKind::None;
    sc.load_step = LoadStep::default();
    sc.noise = [0.0; 3];
    sc.load_estimator.gain = 0.0;
    sc.estimator.mode = crate::estimator::EstimatorMode::Ideal;
    if !sc.params.window().contains(sc.s0 + ds) {
        return Ok(false);
    }
    let exit = settings.exit_ball.map(|ball| SettleExit { ball, samples: 50 });
    let log = run_closed_loop_until(&sc, exit)?;
    if !log.verdict().is_stable() {
        return Ok(false);
    }
    let last = log.s.last().copied().unwrap_or(sc.s0 + ds);
    Ok((last - sc.s0).abs() < settings.tolerance * sc.s0)
}

/// `n` equally spaced values from `lo` to `hi` inclusive.
pub fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Sequential sweep; `result[i][j]` belongs to `(ds[i], sdot[j])`.
pub fn roa_sweep(base: &Scenario, ds: &[f64], sdot: &[f64], settings: &RoaSettings) -> Result<Vec<Vec<bool>>> {
    ds.iter()
        .map(|&a| sdot.iter().map(|&b| roa_point(base, a, b, settings)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn realistic() -> GuidewayModel {
        GuidewayModel::default()
    }

    #[test]
    fn girder_frequency_at_cruise_speed() {
        assert!((girder_frequency(430.0, 24.768) - 4.8225).abs() < 1e-3);
    }

    #[test]
    fn approx_guideway_is_periodic() {
        let f = girder_frequency(430.0, 24.768);
        for k in 0..50 {
            let t = 0.0137 * k as f64;
            let (a, _) = guideway_approx(t, 430.0, 24.768, 1e-3);
            let (b, _) = guideway_approx(t + 1.0 / f, 430.0, 24.768, 1e-3);
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn approx_guideway_starts_at_zero_with_right_slope() {
        let (d, dd) = guideway_approx(0.0, 430.0, 24.768, 1e-3);
        assert_eq!(d, 0.0);
        assert!((dd - 1e-3 * PI * girder_frequency(430.0, 24.768)).abs() < 1e-12);
    }

    #[test]
    fn approx_derivative_matches_differences() {
        let h = 1e-7;
        for k in 1..40 {
            let t = 0.00931 * k as f64;
            let (_, dd) = guideway_approx(t, 300.0, 24.768, 1e-3);
            let fd = (guideway_approx(t + h, 300.0, 24.768, 1e-3).0 - guideway_approx(t - h, 300.0, 24.768, 1e-3).0) / (2.0 * h);
            assert!((dd - fd).abs() < 1e-6 * dd.abs().max(1e-3), "{t}");
        }
    }

    #[test]
    fn realistic_without_offsets_reduces_to_approx() {
        let g = GuidewayModel {
            offset_std: 0.0,
            unevenness_amplitude: 0.0,
            ..realistic()
        };
        for k in 0..200 {
            let t = 0.00713 * k as f64;
            let (a, da) = g.sample(t, 430.0);
            let (b, db) = guideway_approx(t, 430.0, g.girder_length, g.amplitude);
            assert!((a - b).abs() < 1e-15 && (da - db).abs() < 1e-12);
        }
    }

    #[test]
    fn realistic_guideway_is_deterministic_and_continuous() {
        let g = realistic();
        let other = GuidewayModel { seed: 7, ..realistic() };
        let mut differs = false;
        let h = 1e-6;
        for k in 0..2000 {
            let t = 1e-3 * k as f64;
            assert_eq!(g.sample(t, 430.0), g.sample(t, 430.0));
            differs |= g.sample(t, 430.0) != other.sample(t, 430.0);
            let (a, da) = g.sample(t, 430.0);
            let (b, _) = g.sample(t + h, 430.0);
            assert!((b - a - da * h).abs() < 1e-8, "jump at {t}");
        }
        assert!(differs);
    }

    #[test]
    fn pillar_offsets_have_the_configured_spread() {
        let g = realistic();
        let offsets: Vec<f64> = (0..10_000).map(|i| g.girder_offset(i)).collect();
        assert!((std_dev(&offsets) - g.offset_std).abs() < 0.03 * g.offset_std);
        assert!(mean(&offsets).abs() < 0.05 * g.offset_std);
    }

    #[test]
    fn invalid_guideway_is_rejected() {
        assert!(GuidewayModel { girder_length: 0.0, ..realistic() }.validate().is_err());
        assert!(GuidewayModel { amplitude: -1.0, ..realistic() }.validate().is_err());
        assert!(GuidewayModel { ramp_length: 30.0, ..realistic() }.validate().is_err());
        assert!("bumpy".parse::<GuidewayKind>().is_err());
    }

    #[test]
    fn metrics() {
        assert_eq!(l2_norm(&[3.0, 4.0]), 5.0);
        assert_eq!(std_dev(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]), 2.0);
        assert_eq!(std_dev(&[]), 0.0);
        assert_eq!(asymmetric_std(&[1.0, 1.0, 1.0], 1.0), (0.0, 0.0));
        assert_eq!(asymmetric_std(&[3.0, 1.0, -1.0, -5.0], 1.0), (2.0, 5.0f64.sqrt() * 2.0));
    }

    fn synthetic_log(scale: f64) -> SimLog {
        let n = 20;
        SimLog {
            time: (0..n).map(|k| k as f64 * 1e-3).collect(),
            s: vec![0.01; n],
            zdd: vec![0.0; n],
            current: vec![24.0; n],
            u: (0..n).map(|k| scale * (k as f64).sin()).collect(),
            eq: Equilibrium { s0: 0.01, i0: 24.0, u0: 96.0 },
            ..SimLog::default()
        }
    }

    #[test]
    fn rcso_of_identical_and_doubled_cost() {
        let scaling = ScalingConfig::default();
        let q = [75.0, 1.0, 1.0];
        let r = 1.0;
        let reference = synthetic_log(10.0);
        assert_eq!(rcso(&reference, &reference, &q, r, &scaling).unwrap(), 0.0);
        let doubled = synthetic_log(10.0 * 2f64.sqrt());
        assert!((rcso(&doubled, &reference, &q, r, &scaling).unwrap() - 1.0).abs() < 1e-12);
        assert!(rcso(&synthetic_log(0.0), &synthetic_log(0.0), &q, r, &scaling).is_err());
        let mut short = reference.clone();
        short.time.pop();
        assert!(rcso(&short, &reference, &q, r, &scaling).is_err());
    }

    #[test]
    fn roa_trivial_points() {
        let mut sc = Scenario::new(PlantParams::default()).unwrap();
        let settings = RoaSettings::default();
        for c in [ControllerKind::Lqr, ControllerKind::MpcShooting] {
            sc.controller = c;
            assert!(roa_point(&sc, 0.0, 0.0, &settings).unwrap());
            assert!(!roa_point(&sc, 0.011, 0.0, &settings).unwrap());
            assert!(!roa_point(&sc, -0.009, 0.0, &settings).unwrap());
        }
    }

    #[test]
    fn equilibrium_run_stays_put() {
        let mut sc = Scenario::new(PlantParams::default()).unwrap();
        sc.guideway.kind = GuidewayKind::None;
        sc.duration = 0.5;
        for c in [ControllerKind::Lqr, ControllerKind::MpcRti, ControllerKind::MpcGpm] {
            sc.controller = c;
            let log = run_closed_loop(&sc).unwrap();
            assert!(log.verdict().is_stable());
            assert!(log.gap_error().iter().all(|e| e.abs() < 1e-12));
            assert!(log.u.iter().all(|u| u.abs() < 1e-6));
        }
    }

    #[test]
    fn grid_endpoints() {
        assert_eq!(grid(-1.0, 1.0, 5), vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert_eq!(grid(0.0, 2.0, 1), vec![1.0]);
        assert!(grid(0.0, 1.0, 0).is_empty());
    }

    #[test]
    fn controller_names_round_trip() {
        for c in [ControllerKind::MpcShooting, ControllerKind::MpcRti, ControllerKind::MpcGpm, ControllerKind::Lqr] {
            assert_eq!(c.name().parse::<ControllerKind>().unwrap(), c);
        }
    }
}
