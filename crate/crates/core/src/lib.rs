//! Conditional relation networks, hierarchical video reasoning, language
//! binding object graphs and grounding attention priors, built on a small
//! reverse-mode autodiff engine over `f64` tensors.

// Var ops are fallible, so they cannot be the std operator traits.
#![allow(clippy::should_implement_trait)]

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod crn;
pub mod decoders;
pub mod error;
pub mod gap;
pub mod gradcheck;
pub mod gradsuite;
pub mod hcrn;
pub mod lognet;
pub mod models;
pub mod nn;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Scope};
pub use tensor::Tensor;

/// Seeded generator used everywhere randomness is needed.
pub fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
