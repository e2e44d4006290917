//! Audio-visual grouping network for weakly supervised multi-source sound
//! localization, with a synthetic benchmark and the evaluation suite.

pub mod autograd;
pub mod avct;
pub mod encoders;
pub mod error;
pub mod frontend;
pub mod grouping;
pub mod harness;
pub mod localize;
pub mod metrics;
pub mod objective;
pub mod params;
pub mod synth;

pub use error::{Error, Result};
