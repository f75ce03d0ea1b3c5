//! Encoder-free video-language alignment: a spatio-temporal alignment block
//! that turns raw video clips into LM-ready token sequences, plus the toy
//! language model, losses, three-stage trainer, synthetic data generator,
//! and cost profiler used to exercise it end to end.

pub mod aggregators;
pub mod attention;
pub mod config;
pub mod error;
pub mod lsd;
pub mod lste;
pub mod params;
pub mod patch;
pub mod tensor;
pub mod video;

pub use error::{Result, StabError};
