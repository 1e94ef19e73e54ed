//! Multi-resolution model fusion for convolutional networks on continuous
//! scientific data.
//!
//! Coarse copies of a dataset are produced by block averaging. Within each
//! fusion stage a coarse model and a dense model are trained independently
//! on two resolutions, then combined: the convolutional (input-side) layers
//! come from the coarse model and the fully connected head from the dense
//! model. The last fused model is finetuned at the original resolution.

pub mod tensor;

pub mod config;
pub mod data;
pub mod experiment;
pub mod fusion;
pub mod nn;
pub mod parallel;
pub mod report;
pub mod train;
