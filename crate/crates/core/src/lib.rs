//! Parameter-efficient fine-tuning of a Vision Transformer for radar-based
//! human activity recognition.
//!
//! The crate bundles a small reverse-mode autodiff engine, a ViT backbone,
//! LoRA on the query/value projections, serial and parallel bottleneck
//! adapters, the Time-Doppler spectrogram pipeline that produces the model's
//! input images, and the training and evaluation harness.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod manifest;
pub mod model;
pub mod params;
pub mod peft;
pub mod radar;
pub mod tensor;
pub mod train;
pub mod vit;

pub use autodiff::{Graph, VarId};
pub use error::{Error, Result};
pub use tensor::Tensor;
