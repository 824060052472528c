//! Self-supervised image denoising trained only on noisy observations.
//!
//! Each training image `y` is degraded once more into `z` and a U-Net learns
//! `f(z) ≈ y`. At test time `f` is applied to `y` directly, optionally
//! followed by a few damped fixed-point refinement steps.

pub mod config;
pub mod gradcheck;
pub mod image;
pub mod inference;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod noise;
pub mod rng;
pub mod tensor;
pub mod trainer;
