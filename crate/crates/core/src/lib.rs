//! Model predictive control of an electromagnetic suspension for a maglev
//! vehicle: plant model, synthesis model, optimal control problem, two
//! solver families, an LQR baseline, state estimation and a closed-loop
//! simulation kit.

pub mod error;
pub mod estimator;
pub mod gpm;
pub mod lqr;
pub mod ocp;
pub mod plant;
pub mod shooting;
pub mod simkit;
pub mod synthesis;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/model.md")]
    struct Model;
    #[doc = include_str!("../../../book/src/solvers.md")]
    struct Solvers;
    #[doc = include_str!("../../../book/src/simulation.md")]
    struct Simulation;
}
