//! HB-net: per-class recurrent convolutional cluster ensembles for occluded
//! multi-label character recognition, with the data, training and statistics
//! machinery needed to run the comparisons end to end.

pub mod autograd;
mod codec;
pub mod conv;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod models;
pub mod rcl;
pub mod stats;
pub mod tensor;
pub mod training;

pub use autograd::{ConvParams, ConvTerm, Tape, Var};
pub use conv::Padding;
pub use error::{Error, Result};
pub use models::{LossOver, Model, ModelSpec};
pub use rcl::{Readouts, Wiring};
pub use tensor::Tensor;
