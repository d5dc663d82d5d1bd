//! Encoder-decoder backbone, its configuration and parameter storage.

mod config;
mod params;
mod seq2seq;

pub use config::{ModelConfig, DAYS_OF_YEAR, HOURS_OF_DAY};
pub use params::{fan_in_uniform, ParamStore, BACKBONE, TRANSFORM};
pub use seq2seq::{decoder_context, positional_encoding, Forward, Seq2Seq};
