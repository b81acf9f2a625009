//! Federated low-rank adaptation on a small MNIST perceptron.

pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod federation;
pub mod linalg;
pub mod lora_model;
pub mod runner;
pub mod svg;

pub use error::{Error, Result};
