//! Conditional generators trained by minimizing a k-nearest-neighbor estimate
//! of the expected conditional maximum mean discrepancy (ECMMD).
//!
//! The crate provides the estimator family ([`ecmmd`]), its building blocks
//! ([`kernels`], [`knn`]), a small reverse-mode engine ([`autodiff`]) used to
//! train ReLU generators ([`generator`], [`trainer`]), synthetic benchmark
//! tasks with exact conditional samplers ([`datasets`]), and evaluation
//! metrics ([`evaluation`]).

pub mod autodiff;
pub mod cli;
pub mod datasets;
pub mod ecmmd;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod kernels;
pub mod knn;
pub mod matrix;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
