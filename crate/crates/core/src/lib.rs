//! Toy-scale pipeline that jointly synthesizes images and pixel-aligned
//! binary segmentation masks with a dual diffusion model, optionally
//! refines them against a time-conditioned discriminator, super-resolves
//! the pairs with a conditional diffusion model, selects generator
//! checkpoints by RGB-distribution divergence, and validates the
//! synthesized datasets by training a downstream segmentation model scored
//! with Dice/IoU.
//!
//! Module map:
//! - [`diffusion`]: noise schedules, forward corruption, DDPM/DDIM samplers
//! - [`autodiff`] / [`nn`]: the reverse-mode tensor tape and network blocks
//! - [`generator`]: the paired image+mask noise-prediction networks
//! - [`adversarial`]: time-conditioned discriminator and its schedule
//! - [`superres`]: conditional 2x super-resolution diffusion
//! - [`train`]: optimization loops, augmentation, checkpointing
//! - [`selection`]: RGB histograms, Jensen-Shannon scoring, weight choice
//! - [`segmentation`]: downstream Dice/IoU trainer and evaluator
//! - [`dataset`]: pair loading, toy data synthesis, export, eval crops
//! - [`config`] / [`pipeline`] / [`report`]: experiment plumbing

pub mod adversarial;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod generator;
pub mod nn;
pub mod pipeline;
pub mod report;
pub mod resize;
pub mod rng;
pub mod segmentation;
pub mod selection;
pub mod superres;
pub mod train;

pub use error::{Error, Result};
