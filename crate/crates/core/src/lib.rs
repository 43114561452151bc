//! Action-free latent-dynamics pre-training for point-cloud encoders.
//!
//! An online encoder turns point clouds into token features; an inverse
//! dynamics model infers a latent action from the difference of pooled
//! features at two times; a diffusion-transformer forward model denoises
//! the EMA-teacher feature of the other time given the current feature and
//! that action. Both directions (future from present, history from future)
//! are trained under a VICReg objective.

mod binio;
pub mod cli;
pub mod data;
pub mod dynamics;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod objective;
pub mod trainer;
pub mod numerics;

pub use error::{Error, Result};
