//! Multimodal trajectory prediction with behavioral-intention and
//! vectorized-occupancy pruning.

pub mod autolabel;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod model;
pub mod nn;
pub mod scene;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
