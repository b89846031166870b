//! Active learning of derivative-based global sensitivity measures (DGSMs)
//! with Gaussian-process surrogates.
//!
//! The crate is organised bottom-up:
//!
//! - [`kernel`]: ARD squared-exponential kernel and its spatial derivatives.
//! - [`gp`]: fitting, function and derivative posteriors, look-ahead variances.
//! - [`special`]: folded-normal and noncentral-χ² moments and entropies.
//! - [`acquisition`]: acquisition functions and baselines.
//! - [`qmc`]: scrambled Sobol sequences.
//! - [`dgsm`]: DGSM estimation from a surrogate and ground truth for benchmarks.
//! - [`problems`]: benchmark catalog.
//! - [`driver`]: the active-learning loop, metrics and experiment harness.

pub mod acquisition;
pub mod dgsm;
pub mod driver;
pub mod error;
pub mod gp;
pub mod kernel;
pub mod optim;
pub mod problems;
pub mod qmc;
pub mod special;

pub use error::{Error, Result};
