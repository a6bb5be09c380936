//! Posterior inference for the local predictive ability of forecasting
//! experts, and forecast combination weights built from it.

pub mod data;
pub mod error;
pub mod gp_chisq;
pub mod gp_cube;
pub mod hmc;
pub mod kernel;
pub mod linalg;
pub mod ncx2;
pub mod pooling;
pub mod priors;
pub mod quad;
pub mod simlab;
pub mod stats;
pub mod transforms;

pub use error::{Error, Result};
