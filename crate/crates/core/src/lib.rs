//! Attention supervision for visual question answering.
//!
//! An attention network learns to predict human-like attention maps over a grid of
//! visual features; its predictions then supervise the attention of a bilinear
//! answerer. Everything runs on a small reverse-mode autodiff engine in `f64`.

pub mod answerer;
pub mod attention;
pub mod cli;
pub mod data;
pub mod diffcore;
pub mod encoders;
mod error;
pub mod metrics;

pub use error::{Error, Result};
