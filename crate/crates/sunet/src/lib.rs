//! Self-normalising U-Net segmentation toolkit.
//!
//! A desk-scale, dependency-light stack for 2D ultrasound-style segmentation:
//! a minimal f64 reverse-mode autodiff engine, SELU/self-normalising building
//! blocks, the SU-Net and baseline U-Net architectures, mm-aware agreement
//! metrics, rater-agreement statistics, and a leave-one-patient-out
//! cross-validation harness over a synthetic phantom dataset.

pub mod harness;
pub mod imageops;
pub mod metrics;
pub mod network;
pub mod pgm;
pub mod snn;
pub mod stats;
pub mod tape;
pub mod tensor;

pub use tape::{grad_check, Padding, Tape, VarId};
pub use tensor::{Tensor, TensorError};
