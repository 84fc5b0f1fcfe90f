//! Discriminator-cooperative unlikelihood prompt tuning at desk scale.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common instantiations.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod disc;
pub mod discup;
pub mod error;
pub mod eval;
pub mod grad;
pub mod pipeline;
pub mod prompt;
pub mod scalar;
pub mod seqmodel;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = grad::Tensor<f32>;
pub type Tensor64 = grad::Tensor<f64>;
pub type CausalLm32 = seqmodel::CausalLm<f32>;
pub type CausalLm64 = seqmodel::CausalLm<f64>;
pub type Discriminator32 = disc::Discriminator<f32>;
pub type Discriminator64 = disc::Discriminator<f64>;
pub type PromptBlock32 = prompt::PromptBlock<f32>;
pub type PromptBlock64 = prompt::PromptBlock<f64>;
