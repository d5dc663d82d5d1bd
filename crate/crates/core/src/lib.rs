//! Zero-shot forecasting for unmonitored weather stations.
//!
//! Source-station encoder embeddings are mapped, through a location-aware
//! fully connected transform, into an estimate of the target station's
//! embedding; a generative decoder turns that into a 24-hour forecast.

pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod synth;
pub mod transform;
pub mod time;
pub mod train;

pub use error::{Error, Result};
