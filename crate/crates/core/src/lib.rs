//! Rational inattention: posterior geometry, stochastic choice, identification.

#[cfg(feature = "cli")]
pub mod cli;
pub mod error;
pub mod geometry;
pub mod identification;
pub mod plot;
pub mod population;
pub mod ri;
pub mod sdsc;

pub use error::{Error, Result};
