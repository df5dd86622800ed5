//! Differentiable license-plate rim compositing with surrogate ALPR victims,
//! a compound detection/OCR/total-variation objective, a patch trainer,
//! evaluation metrics and distance-correlation statistics.

pub mod dataset;
pub mod depstats;
pub mod diff;
pub mod error;
pub mod evalsuite;
pub mod geometry;
pub mod losses;
pub mod optim;
pub mod pipeline;
pub mod trainer;
pub mod victims;

pub use error::{Error, Result};
