//! Decorrelated and Fourier-partitioned classifier ensembles for 1-D
//! signals, trained sequentially against cached features of earlier arms,
//! and evaluated under PGD and smoothed (SAP) adversarial attacks.

// Validation is written as `!(x > 0.0)` on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod autodiff;
pub mod classifier;
pub mod decorrelation;
pub mod ensemble;
pub mod error;
pub mod fft;
pub mod fourier;
pub mod linalg;
pub mod rng;
pub mod signal_io;
pub mod tensor;

pub use autodiff::{Gradients, Graph, LinearMap, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
