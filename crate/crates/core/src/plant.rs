//! Physics of a single levitated half-magnet in absolute coordinates.
//!
//! The mass point hangs below a ferromagnetic rail. `z` points downwards, so
//! gravity increases `z` and the attractive magnet force decreases it. The air
//! gap is `s = z - d_gw`, where `d_gw` is the (downward) guideway deflection.
//!
//! The magnet enters the equations of motion only through three maps: the
//! force `F(s, I)` and the coefficients `alpha(s, sdot, I)`, `beta(s, I)` of the
//! current equation `dI/dt = alpha * I + beta * U`. Two backends provide them:
//!
//! * [`AnalyticMagnet`]: the classical single-magnet model `F = C (I/s)^2`
//!   with flux linkage `psi = L(s) I`, `L(s) = 2C/s`, which gives
//!   `alpha = -R_c s / (2C) + sdot / s` and `beta = s / (2C)`.
//! * [`TableMagnet`]: bilinear interpolation of `F`, `alpha` at `sdot = 0` and
//!   `beta` over a rectangular `(s, I)` grid read from a CSV file. The
//!   velocity term `sdot / s` of `alpha` is structural and added analytically.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{SVector, Vector3};

use crate::error::{Error, GapBound, Result};
use crate::synthesis::Equilibrium;

/// Physical parameters of the half-magnet.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantParams {
    /// Levitated mass [kg].
    pub mass: f64,
    /// Gravitational acceleration [m/s^2].
    pub gravity: f64,
    /// Magnet constant `C` [N m^2 / A^2].
    pub magnet_constant: f64,
    /// Coil resistance [Ohm].
    pub coil_resistance: f64,
    /// Nominal load force `F_load,0` [N].
    pub load_force: f64,
    /// Absolute voltage bounds [V].
    pub u_min: f64,
    pub u_max: f64,
    /// Physical air-gap validity window [m].
    pub gap_min: f64,
    pub gap_max: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            mass: 600.0,
            gravity: 9.81,
            magnet_constant: 1e-3,
            coil_resistance: 4.0,
            load_force: 0.0,
            u_min: -300.0,
            u_max: 300.0,
            gap_min: 2e-3,
            gap_max: 20e-3,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidParameter(what.to_string()))
            }
        };
        check(self.mass > 0.0, "mass must be positive")?;
        check(self.magnet_constant > 0.0, "magnet constant must be positive")?;
        check(self.coil_resistance > 0.0, "coil resistance must be positive")?;
        check(self.u_min < self.u_max, "u_min must be below u_max")?;
        check(
            0.0 < self.gap_min && self.gap_min < self.gap_max,
            "gap window must satisfy 0 < gap_min < gap_max",
        )?;
        check(
            self.gravity.is_finite() && self.load_force.is_finite(),
            "gravity and load force must be finite",
        )
    }

    pub fn window(&self) -> GapWindow {
        GapWindow {
            lo: self.gap_min,
            hi: self.gap_max,
        }
    }

    /// Nominal weight the magnet has to carry, `m g + F_load,0`.
    pub fn nominal_weight(&self) -> f64 {
        self.mass * self.gravity + self.load_force
    }

    /// Absolute acceleration `g + (F_load - F_mag) / m`.
    ///
    /// Shared by the state derivative and the acceleration output so both are
    /// bit-identical.
    #[inline]
    pub fn acceleration(&self, load: f64, magnet_force: f64) -> f64 {
        self.gravity + (load - magnet_force) / self.mass
    }
}

/// Closed interval of admissible air gaps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapWindow {
    pub lo: f64,
    pub hi: f64,
}

impl GapWindow {
    #[inline]
    pub fn check(&self, s: f64) -> Result<()> {
        if !(s >= self.lo) {
            Err(Error::GapOutOfRange {
                gap: s,
                bound: GapBound::Lower,
                limit: self.lo,
            })
        } else if !(s <= self.hi) {
            Err(Error::GapOutOfRange {
                gap: s,
                bound: GapBound::Upper,
                limit: self.hi,
            })
        } else {
            Ok(())
        }
    }

    pub fn contains(&self, s: f64) -> bool {
        self.check(s).is_ok()
    }
}

/// Magnet force and current-equation partial derivatives at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MagnetPartials {
    pub force: f64,
    pub force_s: f64,
    pub force_i: f64,
    /// `dI/dt` at the evaluation point.
    pub rate: f64,
    pub rate_s: f64,
    pub rate_sdot: f64,
    pub rate_i: f64,
    pub rate_u: f64,
}

/// Classical EMS surrogate `F = C (I/s)^2`, `L(s) = 2C/s`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticMagnet {
    pub magnet_constant: f64,
    pub coil_resistance: f64,
    pub window: GapWindow,
}

impl AnalyticMagnet {
    pub fn new(params: &PlantParams) -> Self {
        Self {
            magnet_constant: params.magnet_constant,
            coil_resistance: params.coil_resistance,
            window: params.window(),
        }
    }

    #[inline]
    fn force_unchecked(&self, s: f64, current: f64) -> f64 {
        let ratio = current / s;
        self.magnet_constant * ratio * ratio
    }

    #[inline]
    fn beta_unchecked(&self, s: f64) -> f64 {
        s / (2.0 * self.magnet_constant)
    }

    /// `alpha I + beta U`, arranged as `beta (U - R_c I) + (sdot/s) I` so that
    /// the steady state `U = R_c I` evaluates to exactly zero.
    #[inline]
    fn rate_unchecked(&self, s: f64, sdot: f64, current: f64, voltage: f64) -> f64 {
        self.beta_unchecked(s) * (voltage - self.coil_resistance * current) + sdot / s * current
    }
}

/// Rectangular lookup table over `(s, I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TableMagnet {
    gaps: Vec<f64>,
    currents: Vec<f64>,
    force: Vec<f64>,
    alpha0: Vec<f64>,
    beta: Vec<f64>,
    window: GapWindow,
}

impl TableMagnet {
    /// Table validity: the intersection of the physical window and the grid hull.
    pub fn window(&self) -> GapWindow {
        self.window
    }

    pub fn gap_axis(&self) -> &[f64] {
        &self.gaps
    }

    pub fn current_axis(&self) -> &[f64] {
        &self.currents
    }

    fn locate(axis: &[f64], v: f64) -> usize {
        // index of the cell [axis[k], axis[k+1]] containing v
        let k = axis.partition_point(|&a| a <= v);
        k.clamp(1, axis.len() - 1) - 1
    }

    /// Bilinear interpolation of (force, alpha0, beta).
    fn interpolate(&self, s: f64, current: f64) -> Result<(f64, f64, f64)> {
        self.window.check(s)?;
        let (i_lo, i_hi) = (self.currents[0], *self.currents.last().unwrap());
        if !(current >= i_lo && current <= i_hi) {
            return Err(Error::OutsideTable { gap: s, current });
        }
        let ks = Self::locate(&self.gaps, s);
        let ki = Self::locate(&self.currents, current);
        let ts = (s - self.gaps[ks]) / (self.gaps[ks + 1] - self.gaps[ks]);
        let ti = (current - self.currents[ki]) / (self.currents[ki + 1] - self.currents[ki]);
        let ni = self.currents.len();
        let at = |data: &[f64]| {
            let v00 = data[ks * ni + ki];
            let v01 = data[ks * ni + ki + 1];
            let v10 = data[(ks + 1) * ni + ki];
            let v11 = data[(ks + 1) * ni + ki + 1];
            (1.0 - ts) * ((1.0 - ti) * v00 + ti * v01) + ts * ((1.0 - ti) * v10 + ti * v11)
        };
        Ok((at(&self.force), at(&self.alpha0), at(&self.beta)))
    }

    fn rate(&self, s: f64, sdot: f64, current: f64, voltage: f64) -> Result<f64> {
        let (_, alpha0, beta) = self.interpolate(s, current)?;
        Ok((alpha0 + sdot / s) * current + beta * voltage)
    }

    /// Parses the `s,I,F,alpha0,beta` CSV format.
    pub fn parse(text: &str, window: GapWindow) -> Result<Self> {
        let mut rows: Vec<(usize, [f64; 5])> = Vec::new();
        let mut header_seen = false;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !header_seen {
                let cols: Vec<&str> = line.split(',').map(str::trim).collect();
                if cols != ["s", "I", "F", "alpha0", "beta"] {
                    return Err(Error::TableParse {
                        line: line_no,
                        message: format!("expected header `s,I,F,alpha0,beta`, found `{line}`"),
                    });
                }
                header_seen = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 5 {
                return Err(Error::TableParse {
                    line: line_no,
                    message: format!("expected 5 columns, found {}", fields.len()),
                });
            }
            let mut row = [0.0; 5];
            for (slot, field) in row.iter_mut().zip(&fields) {
                *slot = field.parse::<f64>().map_err(|e| Error::TableParse {
                    line: line_no,
                    message: format!("bad number `{field}`: {e}"),
                })?;
                if !slot.is_finite() {
                    return Err(Error::TableParse {
                        line: line_no,
                        message: format!("non-finite value `{field}`"),
                    });
                }
            }
            rows.push((line_no, row));
        }
        if !header_seen {
            return Err(Error::TableParse {
                line: text.lines().count().max(1),
                message: "missing header".into(),
            });
        }
        let Some(&(first_line, first)) = rows.first() else {
            return Err(Error::TableParse {
                line: text.lines().count().max(1),
                message: "table has no data rows".into(),
            });
        };

        // Current axis: leading rows sharing the first gap value.
        let mut currents = Vec::new();
        for &(line, row) in rows.iter().take_while(|(_, r)| r[0] == first[0]) {
            if let Some(&prev) = currents.last() {
                if !(row[1] > prev) {
                    return Err(Error::TableParse {
                        line,
                        message: "current axis is not strictly increasing".into(),
                    });
                }
            }
            currents.push(row[1]);
        }
        let ni = currents.len();
        if rows.len() % ni != 0 {
            return Err(Error::TableParse {
                line: rows.last().unwrap().0,
                message: format!("{} data rows do not form a grid with {ni} currents", rows.len()),
            });
        }
        let ns = rows.len() / ni;
        if ns < 2 || ni < 2 {
            return Err(Error::TableParse {
                line: first_line,
                message: "table needs at least two gap and two current samples".into(),
            });
        }
        let mut gaps = Vec::with_capacity(ns);
        let mut force = Vec::with_capacity(rows.len());
        let mut alpha0 = Vec::with_capacity(rows.len());
        let mut beta = Vec::with_capacity(rows.len());
        for (k, chunk) in rows.chunks(ni).enumerate() {
            let gap = chunk[0].1[0];
            if let Some(&prev) = gaps.last() {
                if !(gap > prev) {
                    return Err(Error::TableParse {
                        line: chunk[0].0,
                        message: "gap axis is not strictly increasing".into(),
                    });
                }
            }
            for (j, &(line, row)) in chunk.iter().enumerate() {
                if row[0] != gap || row[1] != currents[j] {
                    return Err(Error::TableParse {
                        line,
                        message: format!("row breaks the rectangular grid (block {k}, entry {j})"),
                    });
                }
                force.push(row[2]);
                alpha0.push(row[3]);
                beta.push(row[4]);
            }
            gaps.push(gap);
        }
        let window = GapWindow {
            lo: window.lo.max(gaps[0]),
            hi: window.hi.min(gaps[ns - 1]),
        };
        if !(window.lo < window.hi) {
            return Err(Error::TableParse {
                line: first_line,
                message: "gap axis does not overlap the validity window".into(),
            });
        }
        Ok(Self {
            gaps,
            currents,
            force,
            alpha0,
            beta,
            window,
        })
    }
}

/// Magnet characteristic used by the plant and the controllers.
///
/// Cloning is cheap for both backends.
#[derive(Debug, Clone, PartialEq)]
pub enum MagnetModel {
    Analytic(AnalyticMagnet),
    Table(Arc<TableMagnet>),
}

impl MagnetModel {
    pub fn analytic(params: &PlantParams) -> Self {
        MagnetModel::Analytic(AnalyticMagnet::new(params))
    }

    pub fn window(&self) -> GapWindow {
        match self {
            MagnetModel::Analytic(m) => m.window,
            MagnetModel::Table(t) => t.window,
        }
    }

    /// Same characteristic with a different admissible gap range. Tables
    /// never extend past their grid hull.
    pub fn with_window(&self, window: GapWindow) -> Self {
        match self {
            MagnetModel::Analytic(m) => MagnetModel::Analytic(AnalyticMagnet { window, ..m.clone() }),
            MagnetModel::Table(t) => {
                let mut t = (**t).clone();
                t.window = GapWindow {
                    lo: window.lo.max(t.gaps[0]),
                    hi: window.hi.min(t.gaps[t.gaps.len() - 1]),
                };
                MagnetModel::Table(Arc::new(t))
            }
        }
    }

    /// Magnet force `F(s, I)` [N].
    pub fn force(&self, s: f64, current: f64) -> Result<f64> {
        match self {
            MagnetModel::Analytic(m) => {
                m.window.check(s)?;
                Ok(m.force_unchecked(s, current))
            }
            MagnetModel::Table(t) => Ok(t.interpolate(s, current)?.0),
        }
    }

    /// Coefficients `(alpha [1/s], beta [A/(V s)])` of the current equation.
    pub fn coefficients(&self, s: f64, sdot: f64, current: f64) -> Result<(f64, f64)> {
        match self {
            MagnetModel::Analytic(m) => {
                m.window.check(s)?;
                let beta = m.beta_unchecked(s);
                Ok((-m.coil_resistance * beta + sdot / s, beta))
            }
            MagnetModel::Table(t) => {
                let (_, alpha0, beta) = t.interpolate(s, current)?;
                Ok((alpha0 + sdot / s, beta))
            }
        }
    }

    /// Right-hand side of the current equation, `alpha I + beta U`.
    pub fn current_rate(&self, s: f64, sdot: f64, current: f64, voltage: f64) -> Result<f64> {
        match self {
            MagnetModel::Analytic(m) => {
                m.window.check(s)?;
                Ok(m.rate_unchecked(s, sdot, current, voltage))
            }
            MagnetModel::Table(t) => t.rate(s, sdot, current, voltage),
        }
    }

    /// Force, current rate and their partial derivatives. Analytic for the
    /// surrogate; central differences on the interpolant for tables.
    pub fn partials(&self, s: f64, sdot: f64, current: f64, voltage: f64) -> Result<MagnetPartials> {
        match self {
            MagnetModel::Analytic(m) => {
                m.window.check(s)?;
                let c = m.magnet_constant;
                let beta = m.beta_unchecked(s);
                let s2 = s * s;
                Ok(MagnetPartials {
                    force: m.force_unchecked(s, current),
                    force_s: -2.0 * c * current * current / (s2 * s),
                    force_i: 2.0 * c * current / s2,
                    rate: m.rate_unchecked(s, sdot, current, voltage),
                    rate_s: (voltage - m.coil_resistance * current) / (2.0 * c) - sdot * current / s2,
                    rate_sdot: current / s,
                    rate_i: -beta * m.coil_resistance + sdot / s,
                    rate_u: beta,
                })
            }
            MagnetModel::Table(t) => {
                let (force, alpha0, beta) = t.interpolate(s, current)?;
                let hs = 1e-8;
                let hi = 1e-5;
                let w = t.window;
                let (i_lo, i_hi) = (t.currents[0], *t.currents.last().unwrap());
                let (s_m, s_p) = ((s - hs).max(w.lo), (s + hs).min(w.hi));
                let (c_m, c_p) = ((current - hi).max(i_lo), (current + hi).min(i_hi));
                let fs_m = t.interpolate(s_m, current)?;
                let fs_p = t.interpolate(s_p, current)?;
                let fi_m = t.interpolate(s, c_m)?;
                let fi_p = t.interpolate(s, c_p)?;
                let ds = s_p - s_m;
                let di = c_p - c_m;
                let alpha0_s = (fs_p.1 - fs_m.1) / ds;
                let beta_s = (fs_p.2 - fs_m.2) / ds;
                let alpha0_i = (fi_p.1 - fi_m.1) / di;
                let beta_i = (fi_p.2 - fi_m.2) / di;
                let alpha = alpha0 + sdot / s;
                Ok(MagnetPartials {
                    force,
                    force_s: (fs_p.0 - fs_m.0) / ds,
                    force_i: (fi_p.0 - fi_m.0) / di,
                    rate: alpha * current + beta * voltage,
                    rate_s: alpha0_s * current - sdot * current / (s * s) + beta_s * voltage,
                    rate_sdot: current / s,
                    rate_i: alpha + alpha0_i * current + beta_i * voltage,
                    rate_u: beta,
                })
            }
        }
    }
}

/// Magnet force [N]; see [`MagnetModel::force`].
pub fn magnet_force(model: &MagnetModel, s: f64, current: f64) -> Result<f64> {
    model.force(s, current)
}

/// `(alpha, beta)`; see [`MagnetModel::coefficients`].
pub fn coil_coefficients(model: &MagnetModel, s: f64, sdot: f64, current: f64) -> Result<(f64, f64)> {
    model.coefficients(s, sdot, current)
}

/// Reads a magnet table file (`s,I,F,alpha0,beta` CSV).
pub fn load_table(path: impl AsRef<Path>, params: &PlantParams) -> Result<MagnetModel> {
    let text = std::fs::read_to_string(path)?;
    Ok(MagnetModel::Table(Arc::new(TableMagnet::parse(&text, params.window())?)))
}

/// Samples the analytic surrogate onto a grid in the table file format.
pub fn sample_table(magnet: &AnalyticMagnet, gaps: &[f64], currents: &[f64]) -> String {
    let mut out = String::from("# sampled from F = C (I/s)^2\ns,I,F,alpha0,beta\n");
    for &s in gaps {
        for &i in currents {
            let beta = magnet.beta_unchecked(s);
            let _ = writeln!(
                out,
                "{s:e},{i:e},{:e},{:e},{beta:e}",
                magnet.force_unchecked(s, i),
                -magnet.coil_resistance * beta
            );
        }
    }
    out
}

/// Absolute plant state `[z, zdot, I]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlantState {
    pub z: f64,
    pub zdot: f64,
    pub current: f64,
}

impl PlantState {
    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.z, self.zdot, self.current)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self {
            z: v[0],
            zdot: v[1],
            current: v[2],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.z.is_finite() && self.zdot.is_finite() && self.current.is_finite()
    }
}

/// Exogenous disturbance `[d_gw, d_gw_dot, d_load]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DisturbanceSample {
    pub d_gw: f64,
    pub d_gw_dot: f64,
    pub d_load: f64,
}

/// Measured outputs `[s, zdd, I]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantOutput {
    pub s: f64,
    pub zdd: f64,
    pub current: f64,
}

/// Analysis model: parameters plus magnet backend.
#[derive(Debug, Clone)]
pub struct Plant {
    pub params: PlantParams,
    pub magnet: MagnetModel,
}

impl Plant {
    pub fn new(params: PlantParams, magnet: MagnetModel) -> Result<Self> {
        params.validate()?;
        Ok(Self { params, magnet })
    }

    pub fn analytic(params: PlantParams) -> Result<Self> {
        let magnet = MagnetModel::analytic(&params);
        Self::new(params, magnet)
    }

    fn diverged(state: &PlantState, e: Error) -> Error {
        Error::Divergence {
            state: *state,
            source: Box::new(e),
        }
    }

    /// State derivative of the analysis model.
    pub fn deriv(&self, state: &PlantState, u: f64, d: &DisturbanceSample) -> Result<PlantState> {
        let s = state.z - d.d_gw;
        let sdot = state.zdot - d.d_gw_dot;
        let force = self
            .magnet
            .force(s, state.current)
            .map_err(|e| Self::diverged(state, e))?;
        let rate = self
            .magnet
            .current_rate(s, sdot, state.current, u)
            .map_err(|e| Self::diverged(state, e))?;
        Ok(PlantState {
            z: state.zdot,
            zdot: self.params.acceleration(self.params.load_force + d.d_load, force),
            current: rate,
        })
    }

    pub fn output(&self, state: &PlantState, d: &DisturbanceSample) -> Result<PlantOutput> {
        let s = state.z - d.d_gw;
        let force = self
            .magnet
            .force(s, state.current)
            .map_err(|e| Self::diverged(state, e))?;
        Ok(PlantOutput {
            s,
            zdd: self.params.acceleration(self.params.load_force + d.d_load, force),
            current: state.current,
        })
    }

    /// One RK4 step of length `h` from time `t` with the input held constant.
    pub fn step<D>(&self, state: &PlantState, u: f64, disturbance: D, t: f64, h: f64) -> Result<PlantState>
    where
        D: Fn(f64) -> DisturbanceSample,
    {
        let next = rk4_step(
            |tau, x: &Vector3<f64>| {
                let st = PlantState::from_vector(x);
                self.deriv(&st, u, &disturbance(tau)).map(PlantState::to_vector)
            },
            t,
            &state.to_vector(),
            h,
        )?;
        Ok(PlantState::from_vector(&next))
    }
}

/// See [`Plant::deriv`].
pub fn plant_deriv(plant: &Plant, state: &PlantState, u: f64, d: &DisturbanceSample) -> Result<PlantState> {
    plant.deriv(state, u, d)
}

/// See [`Plant::output`].
pub fn plant_output(plant: &Plant, state: &PlantState, d: &DisturbanceSample) -> Result<PlantOutput> {
    plant.output(state, d)
}

/// Equilibrium current and voltage holding the nominal weight at gap `s0`.
pub fn equilibrium(params: &PlantParams, magnet: &MagnetModel, s0: f64) -> Result<Equilibrium> {
    magnet.window().check(s0)?;
    let required = params.nominal_weight();
    let infeasible = || Error::InfeasibleEquilibrium { required, gap: s0 };
    if !(required >= 0.0) {
        return Err(infeasible());
    }
    let current = match magnet {
        MagnetModel::Analytic(m) => {
            let closed_form = s0 * (required / m.magnet_constant).sqrt();
            refine_to_fixed_point(params, |i| m.force_unchecked(s0, i), closed_form)
        }
        MagnetModel::Table(t) => {
            let mut lo = t.currents[0].max(0.0);
            let mut hi = *t.currents.last().unwrap();
            let f_lo = t.interpolate(s0, lo)?.0;
            let f_hi = t.interpolate(s0, hi)?.0;
            if !(f_lo <= required && required <= f_hi) {
                return Err(infeasible());
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if t.interpolate(s0, mid)?.0 < required {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let f_at = |i: f64| t.interpolate(s0, i).map(|v| v.0).unwrap_or(f64::NAN);
            if (f_at(lo) - required).abs() <= (f_at(hi) - required).abs() {
                lo
            } else {
                hi
            }
        }
    };
    // steady state of the current equation: alpha I0 + beta U0 = 0
    let voltage = match magnet {
        MagnetModel::Analytic(m) => m.coil_resistance * current,
        MagnetModel::Table(_) => {
            let (alpha, beta) = magnet.coefficients(s0, 0.0, current)?;
            -alpha * current / beta
        }
    };
    if !(params.u_min <= voltage && voltage <= params.u_max) {
        return Err(infeasible());
    }
    Ok(Equilibrium {
        s0,
        i0: current,
        u0: voltage,
    })
}

/// Nudges `guess` by a few ulps so that the plant acceleration at the
/// equilibrium evaluates to exactly zero when such a float exists. The
/// levitation equilibrium is open-loop unstable, so any residual would be
/// amplified by `exp(sqrt(2 g / s0) t)` during simulation.
fn refine_to_fixed_point(params: &PlantParams, force: impl Fn(f64) -> f64, guess: f64) -> f64 {
    let residual = |i: f64| params.acceleration(params.load_force, force(i)).abs();
    let mut best = guess;
    let mut best_res = residual(guess);
    let (mut up, mut down) = (guess, guess);
    for _ in 0..64 {
        if best_res == 0.0 {
            break;
        }
        up = next_up(up);
        down = next_down(down);
        for cand in [up, down] {
            let r = residual(cand);
            if r < best_res {
                best = cand;
                best_res = r;
            }
        }
    }
    best
}

fn next_up(x: f64) -> f64 {
    if x == 0.0 {
        f64::from_bits(1)
    } else if x > 0.0 {
        f64::from_bits(x.to_bits() + 1)
    } else {
        f64::from_bits(x.to_bits() - 1)
    }
}

fn next_down(x: f64) -> f64 {
    -next_up(-x)
}

/// Classical fixed-step Runge-Kutta 4 for `dx/dt = f(t, x)`.
pub fn rk4_step<const D: usize, E, F>(mut f: F, t: f64, x: &SVector<f64, D>, h: f64) -> Result<SVector<f64, D>, E>
where
    F: FnMut(f64, &SVector<f64, D>) -> Result<SVector<f64, D>, E>,
{
    let half = 0.5 * h;
    let k1 = f(t, x)?;
    let k2 = f(t + half, &(x + k1 * half))?;
    let k3 = f(t + half, &(x + k2 * half))?;
    let k4 = f(t + h, &(x + k3 * h))?;
    Ok(x + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plant() -> Plant {
        Plant::analytic(PlantParams::default()).unwrap()
    }

    #[test]
    fn force_is_zero_without_current() {
        let m = MagnetModel::analytic(&PlantParams::default());
        assert_eq!(m.force(0.010, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn force_matches_hand_value() {
        let m = MagnetModel::analytic(&PlantParams::default());
        let f = m.force(0.010, 24.262).unwrap();
        assert!((f - 5886.0).abs() < 0.5, "{f}");
    }

    #[test]
    fn force_agrees_with_energy_method() {
        // co-energy W(s, I) = L(s) I^2 / 2 with L = 2C/s; |F| = -dW/ds at fixed I
        let c = 1e-3;
        let coenergy = |s: f64, i: f64| 0.5 * (2.0 * c / s) * i * i;
        let m = MagnetModel::analytic(&PlantParams::default());
        for &(s, i) in &[(0.010, 24.262), (0.005, 3.0), (0.018, 40.0)] {
            let h = 1e-7;
            let fd = -(coenergy(s + h, i) - coenergy(s - h, i)) / (2.0 * h);
            let f = m.force(s, i).unwrap();
            assert!((f - fd).abs() < 1e-6 * f.max(1.0), "{f} vs {fd}");
        }
    }

    #[test]
    fn force_outside_window_names_the_bound() {
        let m = MagnetModel::analytic(&PlantParams::default());
        match m.force(0.001, 10.0) {
            Err(Error::GapOutOfRange { bound, .. }) => assert_eq!(bound, GapBound::Lower),
            other => panic!("{other:?}"),
        }
        match m.force(0.03, 10.0) {
            Err(Error::GapOutOfRange { bound, .. }) => assert_eq!(bound, GapBound::Upper),
            other => panic!("{other:?}"),
        }
        assert!(m.force(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn coefficients_hand_evaluation() {
        let m = MagnetModel::analytic(&PlantParams::default());
        let (alpha, beta) = m.coefficients(0.010, 0.0, 17.0).unwrap();
        assert!((alpha + 20.0).abs() < 1e-12);
        assert!((beta - 5.0).abs() < 1e-12);
        let (alpha2, _) = m.coefficients(0.010, 0.0, -3.0).unwrap();
        assert_eq!(alpha, alpha2);
    }

    #[test]
    fn steady_voltage_is_resistive_drop() {
        let m = MagnetModel::analytic(&PlantParams::default());
        let i = 12.5;
        assert_eq!(m.current_rate(0.01, 0.0, i, 4.0 * i).unwrap(), 0.0);
    }

    #[test]
    fn analytic_partials_match_finite_differences() {
        let m = MagnetModel::analytic(&PlantParams::default());
        let (s, sd, i, u) = (0.0123, 0.07, 21.0, 55.0);
        let p = m.partials(s, sd, i, u).unwrap();
        let rate = |s, sd, i, u| m.current_rate(s, sd, i, u).unwrap();
        let f = |s, i| m.force(s, i).unwrap();
        let (hs, hi) = (1e-7, 1e-5);
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
        assert!(rel(p.force_s, (f(s + hs, i) - f(s - hs, i)) / (2.0 * hs)) < 1e-6);
        assert!(rel(p.force_i, (f(s, i + hi) - f(s, i - hi)) / (2.0 * hi)) < 1e-6);
        assert!(rel(p.rate_s, (rate(s + hs, sd, i, u) - rate(s - hs, sd, i, u)) / (2.0 * hs)) < 1e-6);
        assert!(rel(p.rate_sdot, (rate(s, sd + 1e-5, i, u) - rate(s, sd - 1e-5, i, u)) / 2e-5) < 1e-6);
        assert!(rel(p.rate_i, (rate(s, sd, i + hi, u) - rate(s, sd, i - hi, u)) / (2.0 * hi)) < 1e-6);
        assert!(rel(p.rate_u, (rate(s, sd, i, u + 1e-3) - rate(s, sd, i, u - 1e-3)) / 2e-3) < 1e-6);
    }

    #[test]
    fn equilibrium_closed_form() {
        let params = PlantParams::default();
        let m = MagnetModel::analytic(&params);
        let eq = equilibrium(&params, &m, 0.010).unwrap();
        assert!((eq.i0 - 24.262).abs() < 1e-3, "{}", eq.i0);
        assert!((eq.u0 - 97.05).abs() < 1e-2, "{}", eq.u0);
        let f = m.force(0.010, eq.i0).unwrap();
        assert!((f - params.nominal_weight()).abs() < 1e-9 * params.nominal_weight());
    }

    #[test]
    fn equilibrium_vanishing_mass() {
        let params = PlantParams {
            mass: 1e-12,
            ..PlantParams::default()
        };
        let m = MagnetModel::analytic(&params);
        let eq = equilibrium(&params, &m, 0.010).unwrap();
        assert!(eq.i0 < 1e-3);
    }

    #[test]
    fn equilibrium_unreachable_force() {
        // the required current exceeds the voltage bound
        let params = PlantParams {
            mass: 1e5,
            ..PlantParams::default()
        };
        let m = MagnetModel::analytic(&params);
        assert!(matches!(
            equilibrium(&params, &m, 0.010),
            Err(Error::InfeasibleEquilibrium { .. })
        ));
    }

    #[test]
    fn derivative_vanishes_at_equilibrium() {
        let p = plant();
        let eq = equilibrium(&p.params, &p.magnet, 0.010).unwrap();
        let st = PlantState {
            z: eq.s0,
            zdot: 0.0,
            current: eq.i0,
        };
        let d = p.deriv(&st, eq.u0, &DisturbanceSample::default()).unwrap();
        assert_eq!(d.z, 0.0);
        assert!(d.zdot.abs() < 1e-9 * p.params.gravity);
        assert!(d.current.abs() < 1e-9 * eq.i0);
    }

    #[test]
    fn equilibrium_is_held_by_integration() {
        let p = plant();
        let eq = equilibrium(&p.params, &p.magnet, 0.010).unwrap();
        let mut st = PlantState {
            z: eq.s0,
            zdot: 0.0,
            current: eq.i0,
        };
        for k in 0..10_000 {
            st = p.step(&st, eq.u0, |_| DisturbanceSample::default(), k as f64 * 1e-4, 1e-4).unwrap();
        }
        assert!((st.z - eq.s0).abs() < 1e-9, "{:e}", st.z - eq.s0);
        assert!((st.current - eq.i0).abs() < 1e-9);
    }

    #[test]
    fn load_disturbance_accelerates_downwards() {
        let p = plant();
        let eq = equilibrium(&p.params, &p.magnet, 0.010).unwrap();
        let st = PlantState {
            z: eq.s0,
            zdot: 0.0,
            current: eq.i0,
        };
        let d = DisturbanceSample {
            d_load: 0.1 * p.params.mass * p.params.gravity,
            ..Default::default()
        };
        let dx = p.deriv(&st, eq.u0, &d).unwrap();
        assert!((dx.zdot - 0.1 * p.params.gravity).abs() < 1e-9);
    }

    #[test]
    fn output_shifts_gap_by_deflection() {
        let p = plant();
        let eq = equilibrium(&p.params, &p.magnet, 0.010).unwrap();
        let st = PlantState {
            z: eq.s0,
            zdot: 0.0,
            current: eq.i0,
        };
        let y = p.output(&st, &DisturbanceSample::default()).unwrap();
        assert_eq!((y.s, y.current), (eq.s0, eq.i0));
        assert!(y.zdd.abs() < 1e-9);
        let d = DisturbanceSample {
            d_gw: 1e-3,
            ..Default::default()
        };
        let y = p.output(&st, &d).unwrap();
        assert!((y.s - (eq.s0 - 1e-3)).abs() < 1e-15);
    }

    #[test]
    fn output_acceleration_is_bit_identical_to_derivative() {
        let p = plant();
        let st = PlantState {
            z: 0.0113,
            zdot: -0.02,
            current: 27.3,
        };
        let d = DisturbanceSample {
            d_gw: 4e-4,
            d_gw_dot: 0.01,
            d_load: 120.0,
        };
        let y = p.output(&st, &d).unwrap();
        let dx = p.deriv(&st, 80.0, &d).unwrap();
        assert_eq!(y.zdd.to_bits(), dx.zdot.to_bits());
    }

    #[test]
    fn gap_violation_is_a_divergence() {
        let p = plant();
        let st = PlantState {
            z: 0.0015,
            zdot: 0.0,
            current: 10.0,
        };
        match p.deriv(&st, 0.0, &DisturbanceSample::default()) {
            Err(Error::Divergence { state, .. }) => assert_eq!(state, st),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rk4_exponential_decay() {
        let x = SVector::<f64, 1>::new(1.0);
        let y = rk4_step(|_, x: &SVector<f64, 1>| Ok::<_, ()>(-x), 0.0, &x, 0.1).unwrap();
        assert!((y[0] - 0.904_837_5).abs() < 1e-6);
        assert!((y[0] - (-0.1f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn rk4_zero_derivative_is_identity() {
        let x = Vector3::new(1.0, -2.0, 3.0);
        let y = rk4_step(|_, _: &Vector3<f64>| Ok::<_, ()>(Vector3::zeros()), 0.0, &x, 0.3).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn rk4_propagates_errors() {
        let x = Vector3::new(1.0, 0.0, 0.0);
        let r = rk4_step(|_, _: &Vector3<f64>| Err::<Vector3<f64>, _>("boom"), 0.0, &x, 0.1);
        assert_eq!(r, Err("boom"));
    }

    #[test]
    fn table_rejects_missing_column() {
        let text = "s,I,F,beta\n0.01,0,0,5\n";
        match TableMagnet::parse(text, PlantParams::default().window()) {
            Err(Error::TableParse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn table_rejects_single_cell() {
        let text = "s,I,F,alpha0,beta\n0.01,10,1000,-20,5\n";
        assert!(matches!(
            TableMagnet::parse(text, PlantParams::default().window()),
            Err(Error::TableParse { .. })
        ));
    }

    #[test]
    fn table_rejects_non_monotone_axis() {
        let text = "s,I,F,alpha0,beta\n\
                    0.01,0,0,-20,5\n0.01,1,1,-20,5\n\
                    0.009,0,0,-20,5\n0.009,1,1,-20,5\n";
        match TableMagnet::parse(text, PlantParams::default().window()) {
            Err(Error::TableParse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn table_rejects_ragged_grid() {
        let text = "s,I,F,alpha0,beta\n\
                    0.01,0,0,-20,5\n0.01,1,1,-20,5\n\
                    0.011,0,0,-20,5\n";
        assert!(TableMagnet::parse(text, PlantParams::default().window()).is_err());
    }

    #[test]
    fn table_rejects_queries_outside_hull() {
        let params = PlantParams::default();
        let m = AnalyticMagnet::new(&params);
        let text = sample_table(&m, &[0.008, 0.009, 0.010], &[0.0, 10.0, 20.0]);
        let t = MagnetModel::Table(Arc::new(TableMagnet::parse(&text, params.window()).unwrap()));
        assert!(t.force(0.0095, 15.0).is_ok());
        assert!(t.force(0.0105, 15.0).is_err());
        assert!(matches!(t.force(0.0095, 25.0), Err(Error::OutsideTable { .. })));
    }
}
