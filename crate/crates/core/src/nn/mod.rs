// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small dense networks with explicit backpropagation.

pub mod loss;
pub mod mlp;
pub mod optim;

pub use mlp::{Activation, ForwardCache, Layer, Mlp, MlpSpec, ParamGrads};
pub use optim::{Adam, AdamConfig};
