//! Graph-based cross-domain knowledge distillation for unsupervised
//! cross-dataset text-to-image retrieval, on synthetic embedding data.
//!
//! The crate is organised bottom-up: dense numerics, a synthetic two-domain
//! dataset, MLP encoders, FIFO memory banks, the cross-domain KNN graph and
//! its propagation layers, the EMA teacher, the two distillation losses, the
//! training loop, and retrieval evaluation.

pub mod checkpoint;
pub mod distillation;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod experiment;
pub mod graph;
pub mod losses;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod synth_data;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::Matrix;
