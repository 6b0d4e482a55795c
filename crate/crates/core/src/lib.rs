//! SceneMixer: a convolutional-mixer scene classifier built on a small
//! CPU tensor core with hand-written gradients.

pub mod analyzer;
pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{Real, Shape, Tensor};
