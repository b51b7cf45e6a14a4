//! Active learning for two-head (weather, light) image classification driven
//! by a learned loss-prediction module.

pub mod acquisition;
pub mod datapool;
pub mod error;
pub mod experiment;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
pub use labels::{LabelSet, Light, Weather};
