//! Desk-scale virtual try-on: a convolutional geometric matcher predicts
//! thin-plate-spline parameters that warp the skip connections of a siamese
//! U-net generator, trained jointly with warp, pixel, perceptual and
//! relativistic adversarial losses, and evaluated with a perceptual metric.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`tps`] — differentiable TPS solve, multi-scale grid generation and
//!   bilinear sampling;
//! - [`tensor`] — a small reverse-mode autodiff engine (with second-order
//!   support where the gradient penalty needs it);
//! - [`matcher`] — the correlation-based geometric matcher emitting theta;
//! - [`unet`] — the siamese warping U-net generator;
//! - [`adversary`] — patch discriminator, relativistic losses, gradient
//!   penalty;
//! - [`objectives`] — warp / pixel / perceptual losses and their weighting;
//! - [`lpips`] — the perceptual evaluation metric;
//! - [`synth`] — procedural paired data with known ground-truth warps, plus
//!   real-data ingestion;
//! - [`pipeline`] — training loop, checkpointing, inference, reports.

pub mod error;
pub mod image;
pub mod tensor;
pub mod tps;

pub mod adversary;
pub mod lpips;
pub mod matcher;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod synth;
pub mod unet;

pub use error::{Error, Result};
pub use image::{Image, Mask};
pub use tps::{ControlLattice, PadMode, SamplingGrid, TpsCoefficients, TpsTheta};
