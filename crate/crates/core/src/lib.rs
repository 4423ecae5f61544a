//! Adaptive hyper-graph convolution network for skeleton-based action
//! recognition, with the training pipeline and verification tooling around it.

pub mod ahc;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod mshgc;
pub mod nn;
pub mod par;
pub mod tcn;
pub mod train;

pub use error::{Error, Result};
