//! Suspicious-region identification on chest CT volumes.
//!
//! A 2.5D classifier (three per-slice 2D encoders fused by a 3D encoder,
//! gated by channel/spatial attention) is explained with a positive-gradient
//! 3D activation map. The crate also carries everything needed to exercise
//! the method without clinical data: a raw volume store, CT preprocessing,
//! an annotated lung phantom generator, training, and evaluation metrics.

pub mod cam;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod preprocess;
pub mod store;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Dims, FeatureMap, Volume};
