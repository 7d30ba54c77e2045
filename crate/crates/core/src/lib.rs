//! Training convolutional networks with a representational-similarity teacher.
//!
//! A network is trained on `λ·Σᵢⱼ(RSMᵢⱼ − R̂SMᵢⱼ)² + cross-entropy`, where `RSM`
//! is a teacher similarity matrix (from neural recordings or a randomized
//! control) and `R̂SM` is the cosine-similarity matrix of one hidden layer's
//! responses to the same stimuli. `λ` is re-fit so the ratio between the two
//! terms stays at a fixed `r`.
//!
//! - [`nn`]: autodiff engine, layers, networks, SGD, checkpoints, gradient checks
//! - [`rsm`]: response matrices and similarity matrices, plus their file formats
//! - [`teacher`]: neural session ingestion and teacher RSM construction
//! - [`training`]: composite objective, λ controller, schedule, experiment runner
//! - [`eval`]: accuracy, superclass errors, unit variance, label corruption
//! - [`data`]: CIFAR-100 binary loading and synthetic stand-in data
//! - [`harness`]: experiment configs, sweeps, figure tables, summaries

pub mod data;
pub mod error;
pub mod eval;
pub mod harness;
pub mod nn;
pub mod par;
pub mod rsm;
pub mod stats;
pub mod teacher;
pub mod training;

pub use error::{Error, Result};
