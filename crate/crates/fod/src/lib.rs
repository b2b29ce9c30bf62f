//! Anomaly detection by explicit intra-/inter-image correlation learning.
//!
//! A small transformer reconstructs patch features while its attention maps
//! are supervised toward RBF target correlations over the patch grid: the
//! intra branch attends within one image, the inter branch attends to a bank
//! of reference features summarizing the normal training set, and the block
//! output is the residual of the two branch outputs. Training alternates two
//! phases with stop-gradient between targets and correlations; scoring fuses
//! the reconstruction error with the inter-correlation divergence.
//!
//! Everything runs in f64 on a reverse-mode tape so all gradients are exact
//! and checkable by central differences, and every random draw flows from a
//! single seed, so full pipelines are bit-reproducible.

pub mod autodiff;
pub mod bank;
pub mod config;
pub mod correlation;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod param;
pub mod pipeline;
pub mod rng;
pub mod scoring;
pub mod training;
pub mod synth;
pub mod tensor;
pub mod tensorfile;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use gradcheck::{gradient_check, verify_gradients, GradCheckReport};
pub use param::{Param, ParamId, ParamStore};
pub use rng::Rng;
pub use tensor::Tensor;
