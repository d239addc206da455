//! Rare-event probability estimation by importance sampling in the latent
//! space of a pre-trained normalizing flow.

pub mod error;
pub mod experiment;
pub mod flow;
pub mod geometry;
pub mod metrics;
pub mod samplers;
pub mod simulators;
pub mod stats;

pub use error::{Error, Result};
pub use stats::RowMatrix;
