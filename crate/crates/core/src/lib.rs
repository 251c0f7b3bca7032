//! Conditional denoising-diffusion caption generation.
//!
//! A small transformer denoiser learns to restore caption embedding
//! sequences from Gaussian noise, conditioned on precomputed image and
//! text feature vectors. This crate contains the whole pipeline: noise
//! schedules, the forward process and losses, the denoiser network with
//! manual backprop, training, staged inference, and BLEU evaluation.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod infer;
pub mod nn;
pub mod rng;
pub mod schedule;
pub mod textcodec;
pub mod training;

pub use error::{Error, Result};
pub use schedule::{build_schedule, make_step_subset, NoiseSchedule, ScheduleKind};
