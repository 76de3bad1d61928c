//! Open-set semi-supervised conditional GAN training at desk scale.
//!
//! The crate covers label algebra for pseudo-labels, a projection
//! discriminator with an auxiliary classifier, the objectives of the
//! entropy-regularized method and its baselines, open-set split
//! construction, the training loop, and FID / IS / PRD metrics.

pub mod augment;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod label_algebra;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod trainer;

pub use error::{Error, Result};
