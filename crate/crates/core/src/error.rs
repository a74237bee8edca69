use std::fmt;

use crate::plant::PlantState;

/// Which side of the air-gap validity window was violated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GapBound {
    Lower,
    Upper,
}

impl fmt::Display for GapBound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GapBound::Lower => f.write_str("lower"),
            GapBound::Upper => f.write_str("upper"),
        }
    }
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum Error {
    #[error("air gap {gap:.6e} m violates the {bound} bound {limit:.6e} m")]
    GapOutOfRange {
        gap: f64,
        bound: GapBound,
        limit: f64,
    },

    #[error("query (s = {gap:.6e} m, I = {current:.6e} A) lies outside the magnet table hull")]
    OutsideTable { gap: f64, current: f64 },

    #[error("table parse error at line {line}: {message}")]
    TableParse { line: usize, message: String },

    #[error("simulation diverged at state z = {:.6e}, zdot = {:.6e}, I = {:.6e}: {source}", .state.z, .state.zdot, .state.current)]
    Divergence {
        state: PlantState,
        #[source]
        source: Box<Error>,
    },

    #[error("required force {required:.6e} N is unreachable at s0 = {gap:.6e} m")]
    InfeasibleEquilibrium { required: f64, gap: f64 },

    #[error("Riccati iteration did not converge (residual {residual:.3e} after {iterations} iterations)")]
    Unstabilizable { residual: f64, iterations: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
