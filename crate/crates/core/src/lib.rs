//! Two-stage video latent generation at desk scale.
//!
//! A preview stage samples a flow-matching model at full resolution for the
//! first steps, then estimates the clean latent, downscales it and re-injects
//! noise to finish cheaply at low resolution ([`reshift`]). A small
//! shift-window transformer ([`denoiser`], [`swin`]) trained on degraded/clean
//! latent pairs maps the upsampled preview back to full detail in a few steps.
//! [`costmodel`] prices both stages analytically.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod codec;
pub mod costmodel;
pub mod degrade;
pub mod denoiser;
pub mod error;
pub mod exec;
pub mod latent;
pub mod lgr;
pub mod nn;
pub mod reshift;
pub mod schedule;
pub mod swin;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;
pub use latent::{axpy, mse, resize_spatial, sample_gaussian, Extent5, LatentGrid, NoiseSource, Rng};
pub use schedule::{estimate_clean, euler_step, sample_ode, Conditioning, SigmaSchedule, VelocityModel};
