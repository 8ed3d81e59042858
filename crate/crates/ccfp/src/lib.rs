//! Dual-stream domain-generalization training on a small self-contained
//! autodiff core.
//!
//! One stream sees each batch unmodified; a second, parameter-disjoint stream
//! sees the same batch through learnable perturbations of its per-instance
//! feature statistics. Training alternates a maximization step that grows the
//! Gram-matrix discrepancy between the streams' shallow features and a
//! minimization step that fits both classifiers while pulling their
//! predictions together. Evaluation follows a leave-one-domain-out protocol
//! with training-domain model selection.

pub mod error;
pub mod harness;
pub mod cli;
pub mod data;
pub mod nn;
pub mod objectives;
pub mod trainer;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{channel_stats, Graph, Real, Tensor};
