//! Training, sampling and evaluation around the core model, plus the
//! `mcld` command line.
//!
//! Stage one fits the motion VAE; stage two freezes it and trains the
//! key-region proposal, condition encoder, fusion and denoiser. Both stages
//! write [`checkpoint::Checkpoint`]s that resume exactly.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod train;
pub mod viz;

pub use checkpoint::{Checkpoint, Stage};
pub use config::{Profile, RunConfig};
pub use error::{Error, Result};
pub use eval::{evaluate, score_runs, Predictor};
pub use train::{train_diffusion, train_diffusion_until, train_vae, train_vae_until, StepRecord, TrainOutcome};
pub use viz::export_viz;
