//! Exploding abelian sandpiles on Z^d: toppling engine, wave processes,
//! explosion criteria, and limit-shape estimation.
//!
//! A sandpile configuration assigns chips to lattice sites; a site holding at
//! least 2d chips is unstable and topples by sending one chip to each of its
//! 2d neighbours. Everything here runs the *parallel* (synchronous) dynamics:
//! all unstable sites topple at once, which makes time a meaningful quantity
//! and keeps runs bit-identical regardless of how work is split.
//!
//! Backgrounds close to the maximal stable value 2d-1 can be explosive: a
//! bounded perturbation sets off an infinite avalanche that conquers the
//! lattice at positive speed. The [`analysis`] and [`shapes`] modules measure
//! where that transition happens and what the growing cluster looks like;
//! [`waves`] implements the wave decomposition used to locate the front.
//!
//! Everything is windowed: simulations run on a finite box and are exact as
//! long as activity stays clear of the boundary (backgrounds are at most
//! 2d-1, so fronts move at most one site per step). Runs that touch the
//! window report it instead of silently truncating.

pub mod analysis;
pub mod background;
pub mod engine;
pub mod grid;
pub mod io;
pub mod shapes;
pub mod waves;

pub use background::{BackgroundSpec, Family};
pub use engine::{BoundaryMode, SandpileState, StabilizeOutcome};
pub use grid::{Grid, Point, Window};

/// Errors shared across the crate. Verification *outcomes* (a counterexample
/// check failing, a threshold not found) are ordinary values on the result
/// types, not errors; `Error` is for calls that cannot produce a result.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("resource limit: {0}")]
    Resource(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
    pub(crate) fn resource(msg: impl Into<String>) -> Self {
        Error::Resource(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
