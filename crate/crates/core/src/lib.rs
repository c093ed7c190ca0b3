//! Multimodal multi-task meme classification, built from scratch.
//!
//! The crate provides a small reverse-mode autodiff engine, a transformer
//! text encoder with cross-layer parameter sharing, a VGG-style convolutional
//! image encoder, concatenation fusion with five independent classifier
//! heads, class-weighted cross-entropy training in two freeze/unfreeze
//! phases, and competition-format macro-F1 evaluation.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fusion;
pub mod image;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
