//! Encoder-decoder recognizer that reads rendered mathematical expressions
//! as LaTeX token sequences.
//!
//! The pipeline is a densely connected convolutional encoder, a 2-D
//! attention with an accumulated coverage map, and a GRU decoder that emits
//! one token per step. Training, evaluation metrics, a synthetic data
//! generator and a checkpoint container complete the stack.

// Validation uses `!(x > 0.0)` style checks on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod image;
pub mod metrics;
pub mod model;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod vocab;
pub mod viz;

pub use autodiff::{Mode, Tape, Var};
pub use error::{Error, Result};
pub use image::{GrayImage, ImageBatch};
pub use model::{Model, ModelConfig};
pub use params::{Graph, LayerParams};
pub use tensor::Tensor;
pub use vocab::Vocabulary;
