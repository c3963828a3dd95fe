//! Channel-attention temporal CNNs for multivariate satellite image time
//! series.
//!
//! The crate trains per-channel convolutional classifiers over pixel time
//! series, weighs channels with an additive attention head whose sigmoid
//! scores double as a per-channel relevance explanation, and ships the full
//! surrounding workflow: synthetic corpus generation, preprocessing
//! (spectral indexes, cloud interpolation, scaling, correlation grouping,
//! object-aware splits), deterministic training with Adam, checkpointing,
//! and evaluation/attention reports — all on a small `f64` reverse-mode
//! autodiff engine built for reproducibility.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use graph::{Graph, NodeId, Padding};
pub use tensor::{Tensor, TensorError};
