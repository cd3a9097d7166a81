//! Formula-image to LaTeX translation: a CNN encoder with 2-D sinusoidal
//! positional encoding, an attentional stacked-LSTM decoder, token-level and
//! policy-gradient training, beam search, and sequence/image metrics.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod decoding;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod param;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod training;

pub use config::Config;
pub use error::{Error, Result};
pub use model::Model;
pub use param::{Bound, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
