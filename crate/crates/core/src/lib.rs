//! Sequential Bayesian experimental design targeting a quantity of interest.

pub mod acquisition;
pub mod bench;
pub mod design;
pub mod error;
pub mod hmc;
pub mod inner_opt;
pub mod kle;
pub mod linalg;
pub mod nsgp;
pub mod qoi;
pub mod rng;
pub mod sdoe;

pub use error::{BodeError, Result};
