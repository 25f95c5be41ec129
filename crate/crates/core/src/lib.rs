//! Temporal reasoning graph (TRG) for order-sensitive activity recognition.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), the
//! TRG block ([`trg`]), classifiable models and ablation baselines
//! ([`model`]), a synthetic order-sensitive benchmark ([`data`]), and the
//! training/evaluation harness ([`train`], [`optim`], [`metrics`]).

pub mod checkpoint;
pub mod complexity;
pub mod config;
pub mod data;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod plot;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod trg;

pub use tensor::{Scalar, Tensor, TensorError};
