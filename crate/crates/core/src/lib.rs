//! Exact and stochastic dynamics of memory-M first-order methods on
//! quadratic problems with power-law spectra.

pub mod algorithm;
pub mod error;
pub mod evolution;
pub mod experiment;
pub mod fit;
mod kernel;
pub mod montecarlo;
pub mod poly;
pub mod propagators;
pub mod spectrum;
pub mod stability;

pub use algorithm::{Am1, MemoryParams, MultistepCoeffs, Schedule};
pub use error::{Error, Result};
pub use evolution::{Engine, LossTrajectory, MomentState, Recording, SeParams};
pub use spectrum::{build_power_law, PowerLawSpec, Spectrum};
