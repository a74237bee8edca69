//! `key = value` run configuration with dotted section paths.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use maglev_mpc::estimator::EstimatorMode;
use maglev_mpc::gpm::GpmSettings;
use maglev_mpc::plant::{load_table, GapWindow, PlantParams};
use maglev_mpc::simkit::{ControllerKind, GuidewayKind, LoadStep, RoaSettings, Scenario};
use maglev_mpc::synthesis::SynthState;

use crate::CliError;

/// Every recognised key with its default and a short description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("plant.m", "600", "levitated mass [kg]"),
    ("plant.g", "9.81", "gravitational acceleration [m/s^2]"),
    ("plant.C", "1e-3", "magnet constant [N m^2/A^2]"),
    ("plant.R_c", "4", "coil resistance [Ohm]"),
    ("plant.load_force", "0", "nominal load force [N]"),
    ("plant.u_min", "-300", "lower voltage bound [V]"),
    ("plant.u_max", "300", "upper voltage bound [V]"),
    ("plant.gap_min", "2e-3", "lower end of the air-gap window [m]"),
    ("plant.gap_max", "20e-3", "upper end of the air-gap window [m]"),
    ("plant.s0", "10e-3", "nominal air gap [m]"),
    ("plant.table", "", "magnet table file (s,I,F,alpha0,beta); empty selects the analytic law"),
    ("prediction.gap_min", "", "lower gap accepted by the prediction model [m]; empty is half of plant.gap_min"),
    ("prediction.gap_max", "", "upper gap accepted by the prediction model [m]; empty is twice plant.gap_max"),
    ("scaling.ds", "1e-2", "unit of the gap deviation [m]"),
    ("scaling.sdot", "1e-1", "unit of the gap rate [m/s]"),
    ("scaling.di", "10", "unit of the current deviation [A]"),
    ("scaling.u", "100", "unit of the voltage deviation [V]"),
    ("scaling.y_s", "1e-2", "unit of the gap output [m]"),
    ("scaling.y_zdd", "9.81", "unit of the acceleration output [m/s^2]"),
    ("scaling.y_i", "10", "unit of the current output [A]"),
    ("ocp.horizon", "0.05", "prediction horizon [s]"),
    ("ocp.intervals", "25", "shooting intervals"),
    ("ocp.substeps", "2", "RK4 steps per interval"),
    ("ocp.q_s", "75", "gap weight"),
    ("ocp.q_zdd", "15", "acceleration weight"),
    ("ocp.q_i", "5", "current weight"),
    ("ocp.r", "1", "input weight"),
    ("sqp.max_iter", "50", "SQP iteration limit"),
    ("sqp.kkt_tol", "1e-8", "SQP stationarity tolerance"),
    ("sqp.defect_tol", "1e-9", "SQP continuity tolerance"),
    ("sqp.max_halvings", "8", "line-search halvings"),
    ("gpm.max_iter", "2000", "gradient iterations of the converged solver"),
    ("gpm.fast_iter", "3", "gradient iterations per sample of the fast solver"),
    ("gpm.gamma0", "0.1", "initial gradient step"),
    ("gpm.cost_tol", "1e-12", "relative predicted-decrease tolerance"),
    ("gpm.grad_tol", "1e-7", "projected-gradient tolerance"),
    ("gpm.grid", "0", "integration cells over the horizon; 0 uses intervals * substeps"),
    ("controller", "mpc-shooting", "mpc-shooting, mpc-rti, mpc-gpm or lqr"),
    ("sim.velocity", "430", "vehicle velocity [km/h]"),
    ("sim.duration", "2", "simulated time [s]"),
    ("sim.delta", "1e-3", "sampling period [s]"),
    ("sim.plant_substeps", "10", "plant RK4 steps per sampling period"),
    ("sim.seed", "0", "measurement noise seed"),
    ("sim.noise_s", "0", "gap noise standard deviation [m]"),
    ("sim.noise_zdd", "0", "acceleration noise standard deviation [m/s^2]"),
    ("sim.noise_i", "0", "current noise standard deviation [A]"),
    ("sim.initial_ds", "0", "initial gap offset [m]"),
    ("sim.initial_sdot", "0", "initial gap rate [m/s]"),
    ("sim.initial_di", "0", "initial current offset [A]"),
    ("estimator.mode", "ideal", "ideal or filtered"),
    ("estimator.omega_c", "50", "complementary filter crossover [rad/s]"),
    ("load_estimator.gain", "1e6", "integral gain of the load estimate [N/(m s)]"),
    ("load_estimator.limit", "", "bound on the load estimate [N]; empty is half the weight"),
    ("guideway.kind", "realistic", "none, approx or realistic"),
    ("guideway.girder_length", "24.768", "girder length [m]"),
    ("guideway.amplitude", "1e-3", "bending amplitude [m]"),
    ("guideway.offset_std", "0.5e-3", "pillar offset standard deviation [m]"),
    ("guideway.unevenness_amplitude", "0.2e-3", "unevenness amplitude [m]"),
    ("guideway.unevenness_wavelength", "3.1", "unevenness wavelength [m]"),
    ("guideway.ramp_length", "0.3", "offset transition length [m]"),
    ("guideway.seed", "0", "pillar offset seed"),
    ("load_step.force", "0", "additional load force, positive downwards [N]"),
    ("load_step.time", "0", "switch-on time of the load step [s]"),
    ("roa.controllers", "lqr,mpc-shooting", "controllers swept"),
    ("roa.ds_min", "-7e-3", "lowest initial gap offset [m]"),
    ("roa.ds_max", "9e-3", "highest initial gap offset [m]"),
    ("roa.sdot_min", "-0.5", "lowest initial gap rate [m/s]"),
    ("roa.sdot_max", "0.5", "highest initial gap rate [m/s]"),
    ("roa.points", "41", "grid points per axis"),
    ("roa.settle_time", "2", "simulated time per point [s]"),
    ("roa.tolerance", "0.01", "final gap band as a fraction of s0"),
    ("roa.exit_ball", "1e-4", "scaled state norm that ends a run early; 0 disables"),
    ("horizon_sweep.horizons", "0.02,0.03,0.04,0.05,0.06,0.07,0.08,0.09,0.1", "horizons [s]"),
    ("horizon_sweep.q_s", "75,300", "gap weights"),
    ("horizon_sweep.x0", "0.5,0,0.5", "scaled initial state"),
    ("tune_sweep.q_s", "0,25,50,75,100", "gap weights"),
    ("tune_sweep.q_zdd", "0,5,10,15,20", "acceleration weights"),
    ("robustness.controllers", "mpc-shooting,lqr", "controllers swept"),
    ("robustness.velocities", "50,100,150,200,250,300,350,400,450,500,550,600,650", "velocities [km/h]"),
    ("robustness.duration", "20", "simulated time per velocity [s]"),
    ("suboptimality.solvers", "mpc-rti,mpc-gpm", "fast solvers compared with the reference"),
    ("suboptimality.horizons", "0.02,0.03,0.04,0.05,0.06,0.07,0.08,0.09,0.1", "horizons [s]"),
    ("suboptimality.intervals", "1e-3,2e-3", "interval lengths [s]"),
    ("suboptimality.reference_horizon", "0.1", "horizon of the converged reference [s]"),
    ("suboptimality.reference_interval", "1e-3", "interval length of the reference [s]"),
    ("suboptimality.duration", "1", "simulated time per configuration [s]"),
];

/// Resolved configuration: defaults overridden by file entries and `--set`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|&(k, v, _)| (k, v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| CliError::Usage(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let (k, _, _) = KEYS
            .iter()
            .find(|(k, _, _)| *k == key)
            .ok_or_else(|| CliError::Usage(format!("unknown key `{key}`")))?;
        self.values.insert(k, value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("`{pair}` is not of the form key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("key `{key}` missing from the defaults table"))
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.get(key);
        raw.parse()
            .map_err(|_| CliError::Usage(format!("`{key}`: cannot parse `{raw}`")))
    }

    /// As [`parsed`](Self::parsed), with `fallback` for an empty value.
    pub fn parsed_or<T: FromStr>(&self, key: &str, fallback: T) -> Result<T, CliError> {
        if self.get(key).is_empty() {
            Ok(fallback)
        } else {
            self.parsed(key)
        }
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| CliError::Usage(format!("`{key}`: cannot parse `{s}`"))))
            .collect()
    }

    /// Resolved entries in key order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (*k, v.as_str()))
    }

    /// Copy with derived defaults written out, as recorded in result files.
    pub fn resolved(&self) -> Result<Self, CliError> {
        let sc = self.scenario()?;
        let mut out = self.clone();
        for (key, value) in [
            ("prediction.gap_min", sc.prediction_window.lo),
            ("prediction.gap_max", sc.prediction_window.hi),
            ("load_estimator.limit", sc.load_estimator.limit),
        ] {
            if out.get(key).is_empty() {
                out.set(key, &value.to_string())?;
            }
        }
        Ok(out)
    }

    /// The scenario described by everything except the sweep sections.
    pub fn scenario(&self) -> Result<Scenario, CliError> {
        let params = PlantParams {
            mass: self.parsed("plant.m")?,
            gravity: self.parsed("plant.g")?,
            magnet_constant: self.parsed("plant.C")?,
            coil_resistance: self.parsed("plant.R_c")?,
            load_force: self.parsed("plant.load_force")?,
            u_min: self.parsed("plant.u_min")?,
            u_max: self.parsed("plant.u_max")?,
            gap_min: self.parsed("plant.gap_min")?,
            gap_max: self.parsed("plant.gap_max")?,
        };
        params.validate()?;
        let mut sc = Scenario::new(params.clone())?;
        let table = self.get("plant.table");
        if !table.is_empty() {
            sc.magnet = load_table(table, &params)?;
        }
        sc.s0 = self.parsed("plant.s0")?;
        sc.prediction_window = GapWindow {
            lo: self.parsed_or("prediction.gap_min", sc.prediction_window.lo)?,
            hi: self.parsed_or("prediction.gap_max", sc.prediction_window.hi)?,
        };
        sc.scaling.state = [self.parsed("scaling.ds")?, self.parsed("scaling.sdot")?, self.parsed("scaling.di")?];
        sc.scaling.input = self.parsed("scaling.u")?;
        sc.scaling.output = [self.parsed("scaling.y_s")?, self.parsed("scaling.y_zdd")?, self.parsed("scaling.y_i")?];

        sc.ocp.horizon = self.parsed("ocp.horizon")?;
        sc.ocp.intervals = self.parsed("ocp.intervals")?;
        sc.ocp.substeps = self.parsed("ocp.substeps")?;
        sc.ocp.q = [self.parsed("ocp.q_s")?, self.parsed("ocp.q_zdd")?, self.parsed("ocp.q_i")?];
        sc.ocp.r = self.parsed("ocp.r")?;
        sc.sqp.max_iter = self.parsed("sqp.max_iter")?;
        sc.sqp.kkt_tol = self.parsed("sqp.kkt_tol")?;
        sc.sqp.defect_tol = self.parsed("sqp.defect_tol")?;
        sc.sqp.max_halvings = self.parsed("sqp.max_halvings")?;

        sc.controller = self.parsed::<ControllerKind>("controller").map_err(|_| bad_value(self, "controller"))?;
        sc.gpm = self.gpm_settings(sc.controller, &sc)?;

        sc.velocity = self.parsed("sim.velocity")?;
        sc.duration = self.parsed("sim.duration")?;
        sc.delta = self.parsed("sim.delta")?;
        sc.plant_substeps = self.parsed("sim.plant_substeps")?;
        sc.seed = self.parsed("sim.seed")?;
        sc.noise = [self.parsed("sim.noise_s")?, self.parsed("sim.noise_zdd")?, self.parsed("sim.noise_i")?];
        sc.initial = SynthState {
            ds: self.parsed("sim.initial_ds")?,
            sdot: self.parsed("sim.initial_sdot")?,
            di: self.parsed("sim.initial_di")?,
        };
        sc.estimator.mode = self.parsed::<EstimatorMode>("estimator.mode").map_err(|_| bad_value(self, "estimator.mode"))?;
        sc.estimator.omega_c = self.parsed("estimator.omega_c")?;
        sc.estimator.delta = sc.delta;
        sc.load_estimator.gain = self.parsed("load_estimator.gain")?;
        sc.load_estimator.limit = self.parsed_or("load_estimator.limit", sc.load_estimator.limit)?;

        sc.guideway.kind = self.parsed::<GuidewayKind>("guideway.kind").map_err(|_| bad_value(self, "guideway.kind"))?;
        sc.guideway.girder_length = self.parsed("guideway.girder_length")?;
        sc.guideway.amplitude = self.parsed("guideway.amplitude")?;
        sc.guideway.offset_std = self.parsed("guideway.offset_std")?;
        sc.guideway.unevenness_amplitude = self.parsed("guideway.unevenness_amplitude")?;
        sc.guideway.unevenness_wavelength = self.parsed("guideway.unevenness_wavelength")?;
        sc.guideway.ramp_length = self.parsed("guideway.ramp_length")?;
        sc.guideway.seed = self.parsed("guideway.seed")?;
        sc.load_step = LoadStep {
            force: self.parsed("load_step.force")?,
            time: self.parsed("load_step.time")?,
        };
        sc.validate()?;
        Ok(sc)
    }

    /// The fast iteration budget when the closed loop runs `mpc-gpm`, the
    /// converged one otherwise.
    pub fn gpm_settings(&self, controller: ControllerKind, sc: &Scenario) -> Result<GpmSettings, CliError> {
        let mut s = GpmSettings::converged(&sc.ocp);
        s.max_iter = if controller == ControllerKind::MpcGpm {
            self.parsed("gpm.fast_iter")?
        } else {
            self.parsed("gpm.max_iter")?
        };
        s.gamma0 = self.parsed("gpm.gamma0")?;
        s.cost_tol = self.parsed("gpm.cost_tol")?;
        s.grad_tol = self.parsed("gpm.grad_tol")?;
        let grid: usize = self.parsed("gpm.grid")?;
        if grid > 0 {
            s.grid = grid;
        }
        Ok(s)
    }

    pub fn roa_settings(&self) -> Result<RoaSettings, CliError> {
        let ball: f64 = self.parsed("roa.exit_ball")?;
        Ok(RoaSettings {
            settle_time: self.parsed("roa.settle_time")?,
            tolerance: self.parsed("roa.tolerance")?,
            exit_ball: (ball > 0.0).then_some(ball),
        })
    }

    pub fn controllers(&self, key: &str) -> Result<Vec<ControllerKind>, CliError> {
        self.list::<ControllerKind>(key).map_err(|_| bad_value(self, key))
    }
}

fn bad_value(cfg: &RunConfig, key: &str) -> CliError {
    CliError::Usage(format!("`{key}`: invalid value `{}`", cfg.get(key)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_chapter_lists_every_key() {
        let chapter = include_str!("../../../book/src/configuration.md");
        for (key, default, _) in KEYS {
            let row = if default.is_empty() { format!("| `{key}` | |") } else { format!("| `{key}` | `{default}` |") };
            assert!(chapter.contains(&row), "{key} missing or stale in the configuration chapter");
        }
    }

    #[test]
    fn defaults_build_the_default_scenario() {
        let sc = RunConfig::default().scenario().unwrap();
        let reference = Scenario::new(PlantParams::default()).unwrap();
        assert_eq!(sc.params, reference.params);
        assert_eq!(sc.ocp, reference.ocp);
        assert_eq!(sc.guideway, reference.guideway);
        assert_eq!(sc.prediction_window, reference.prediction_window);
        assert_eq!(sc.load_estimator, reference.load_estimator);
        assert_eq!(sc.controller, reference.controller);
    }

    #[test]
    fn keys_are_unique() {
        let mut keys: Vec<_> = KEYS.iter().map(|k| k.0).collect();
        keys.sort_unstable();
        keys.dedup();
        assert_eq!(keys.len(), KEYS.len());
    }

    #[test]
    fn file_and_overrides() {
        let mut cfg = RunConfig::parse("# comment\nplant.m = 500  # lighter\n\nsim.velocity=300\n").unwrap();
        assert_eq!(cfg.get("plant.m"), "500");
        cfg.set_pair("sim.velocity=250").unwrap();
        let sc = cfg.scenario().unwrap();
        assert_eq!(sc.params.mass, 500.0);
        assert_eq!(sc.velocity, 250.0);
    }

    #[test]
    fn unknown_and_malformed_entries_are_rejected() {
        assert!(RunConfig::parse("plant.mass = 3").is_err());
        assert!(RunConfig::parse("plant.m 3").is_err());
        let mut cfg = RunConfig::default();
        assert!(cfg.set_pair("controller").is_err());
        cfg.set("controller", "pid").unwrap();
        assert!(cfg.scenario().is_err());
        cfg.set("controller", "lqr").unwrap();
        cfg.set("plant.m", "heavy").unwrap();
        assert!(cfg.scenario().is_err());
    }

    #[test]
    fn lists() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.list::<f64>("horizon_sweep.x0").unwrap(), vec![0.5, 0.0, 0.5]);
        assert_eq!(cfg.controllers("roa.controllers").unwrap(), vec![ControllerKind::Lqr, ControllerKind::MpcShooting]);
    }
}
