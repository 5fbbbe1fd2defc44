//! Adversarial domain adaptation for semantic segmentation with Gram-matrix
//! feature alignment, on a small reverse-mode autodiff engine.
//!
//! Builds without `std` (an allocator is required).

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use scalar::Scalar;
pub use tensor::{Tensor, TensorError};
