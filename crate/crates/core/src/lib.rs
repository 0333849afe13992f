//! Moving-object segmentation from point trajectories.
//!
//! Pipeline: synthetic scene generation → per-track feature assembly → a
//! spatio-temporal attention encoder and a motion/semantic decoupled decoder
//! that classify each track as moving or static → trajectory grouping into
//! object prompts → mask densification through a promptable segmenter →
//! region/boundary evaluation.

pub mod cli;
pub mod error;
pub mod eval;
pub mod mask;
pub mod model;
pub mod motion_encoder;
pub mod nn;
pub mod prompting;
pub mod synth;
pub mod tensor;
pub mod trackdata;
pub mod tracks_decoder;
pub mod training;
pub mod util;

pub use error::{Error, Result};
