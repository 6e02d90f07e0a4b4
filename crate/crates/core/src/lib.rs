//! Mesh recovery toolkit: mesh data model, SHOT descriptors, a reverse-mode
//! gradient engine with neural layers, composite mesh losses, adversarial
//! training, synthetic data and evaluation.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod gan;
pub mod gradcheck;
pub mod losses;
pub mod mesh;
pub mod pipeline;
pub mod shot;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
