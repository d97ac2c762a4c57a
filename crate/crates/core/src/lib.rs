//! Core model code for multi-condition latent diffusion motion prediction.
//!
//! The crate is organised bottom-up:
//!
//! * [`domain`]: skeletons, motion sequences, scene clouds and seeded randomness.
//! * [`tensor`] and [`autodiff`]: a small dense `f64` tensor type and a
//!   reverse-mode tape used by every trainable component.
//! * [`nn`]: parameter storage, initialisation, transformer layers and AdamW.
//! * [`vae`], [`krp`], [`mae`], [`diffusion`]: the model stages.
//! * [`model`]: the assembled predictor and both training objectives.
//! * [`metrics`]: pose/path MPJPE, ADE/FDE and run aggregation.

pub mod autodiff;
pub mod diffusion;
pub mod domain;
pub mod error;
pub mod gradcheck;
pub mod krp;
pub mod mae;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod vae;

pub use error::{Error, Result};
