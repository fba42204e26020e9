// SPDX-License-Identifier: MIT OR Apache-2.0

//! Concept bottleneck models and tools for auditing what their concept layer
//! actually carries.
//!
//! A model is a pair `f ∘ g`: `g` maps inputs to a concept layer and `f` maps
//! that layer to the target. [`models`] trains the pair independently,
//! sequentially, jointly, or jointly with extra unsupervised units. The
//! remaining modules probe the trained layer for information beyond the
//! annotated concepts:
//!
//! - [`probes`]: oracle predictions, interventions and single-concept sweeps.
//! - [`attribution`]: gradient, integrated-gradient and SmoothGrad saliency.
//! - [`diagnostics`]: concept-space saliency agreement with an oracle.
//! - [`regularizers`]: MI and angular penalties on the extended layer.
//! - [`pipeline`]: one config in, one reproducible run directory out.
//!
//! Everything numeric is generic over [`scalar::Scalar`]; the aliases below fix
//! it to `f64`, which is what the pipeline and CLI use.

pub mod attribution;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod probes;
pub mod regularizers;
pub mod render;
pub mod scalar;
pub mod synth;

pub use error::{CbmError, Result};

pub type Dataset = data::ConceptDataset<f64>;
pub type Model = models::BottleneckModel<f64>;
pub type Task = synth::SyntheticTask<f64>;
