//! Garment-centric latent diffusion workbench.
//!
//! Everything runs on a small deterministic f64 stack: a reverse-mode tape,
//! a miniature UNet denoiser with injectable attention sites, a garment
//! encoder derived from the denoiser, a try-on control branch, two-stage
//! training, a data synthesis engine, and an evaluation kit.

pub mod attention;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod control;
pub mod data_engine;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod garment;
pub mod imageio;
pub mod latent;
pub mod nn;
pub mod pipeline;
pub mod schedule;
pub mod tensor;
pub mod text;
pub mod toy;
pub mod training;
pub mod unet;

pub use error::{Result, WeftError};
