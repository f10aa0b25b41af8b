//! Text-to-image GAN built around a single generator/discriminator pair.
//!
//! The generator refines feature maps at every scale with two attention
//! mechanisms conditioned on a sentence embedding — one over channels, one
//! over pixels — plus a conditional instance/layer normalization blend. The
//! discriminator scores (image, sentence) pairs and is regularized with a
//! gradient penalty on real data, which requires differentiating through
//! gradient norms; the in-crate tensor library records backward passes so
//! second-order gradients come out of the same machinery.
//!
//! Everything is desk-scale by design: 64-bit floats, CPU only, a synthetic
//! captioned-shapes dataset, and finite-difference oracles wired into the
//! test suite so every gradient path is checkable.

pub mod attention;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod rng;
pub mod trainer;
pub mod verify;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
