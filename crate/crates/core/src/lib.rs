//! Knudsen stochastic billiards in random planar tubes.
//!
//! * [`geometry`]: the random tube, its sections and exact ray casting.
//! * [`billiard`]: cosine reflection, the wall-to-wall chain and the
//!   continuous-time billiard.
//! * [`gas`]: the open tube with Poisson injection at the gates.
//! * [`estimators`]: transport constants and statistical tests.

pub mod billiard;
pub mod estimators;
pub mod gas;
pub mod geometry;
pub mod rng;
pub mod stats;

/// Crate version, recorded in run reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
