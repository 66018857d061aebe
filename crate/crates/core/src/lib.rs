//! Duration-dependent Markovian arrival processes and the stochastic fluid processes they drive.
//!
//! The crate covers exact simulation on the uniformization grid, survival matrices by product
//! integrals, the recursive n-bridge duration-level densities, first-return, finite-time and
//! Erlangized ruin descriptors, and Monte Carlo and Riccati oracles.

pub mod bridge;
pub mod config;
pub mod descriptors;
pub mod error;
pub mod expm;
pub mod gallery;
pub mod kolmogorov;
pub mod model;
pub mod oracle;
pub mod sim;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::{BlockView, DurationKernel, FluidModel, Hazard, KernelRepr, StateSpace};
