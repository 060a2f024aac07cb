//! Equivariant diffusion for small molecules with per-atom asynchronous
//! noise levels.

pub mod asynctime;
pub mod config;
pub mod egnn;
pub mod error;
pub mod metrics;
pub mod molecule;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod training;

pub use error::{Error, Result};
