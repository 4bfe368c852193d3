//! Shape-guided steering of toy diffusion and flow-matching generators.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`autodiff`], [`optim`], [`nn`]: a small reverse-mode
//!   autodiff core with Adam and MLPs.
//! * [`shapeworld`]: procedural shape×texture images and triplet sampling.
//! * [`teacher`]: the triplet-trained shape embedding, odd-one-out
//!   evaluation, and the texture-classifier baseline.
//! * [`generative`]: noise schedule, DDIM and Euler flow samplers, decoders.
//! * [`steer`]: guidance loss, normalized latent updates, clamping, and the
//!   guided samplers.

pub mod autodiff;
pub mod error;
pub mod exec;
pub mod generative;
pub mod io;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod shapeworld;
pub mod steer;
pub mod teacher;
pub mod tensor;

pub use error::{Error, Result};
pub use exec::Exec;
pub use tensor::Tensor;
