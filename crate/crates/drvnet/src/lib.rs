//! Dense-residual UNet for retinal vessel segmentation.
//!
//! The model is a cascade of two sub-networks. A three-level
//! encoder–decoder backbone built from residual dense (RDN) and residual
//! squeeze-and-excitation (RSE) blocks produces an initial vessel
//! probability map; a shallow fine-tune tail refines that estimate
//! conditioned on the input image. Training happens in two phases:
//! backbone first, then the tail with every backbone parameter frozen.
//!
//! Crate layout:
//!
//! * [`nn`] — f64 CPU layers with explicit forward/backward passes.
//! * [`blocks`] — the RDN and RSE building blocks.
//! * [`network`] — backbone, tail, and the full cascaded model.
//! * [`loss`] — binary cross-entropy, soft Dice, and their weighted sum.
//! * [`data`] — DRIVE / CHASE DB / STARE ingestion, padding, augmentation,
//!   split plans.
//! * [`training`] — two-phase protocol, Adam, stepped learning rate,
//!   checkpoints.
//! * [`evaluation`] — thresholding, confusion counts, Se/Sp/Acc/AUC/G-mean,
//!   multi-run and k-fold aggregation, result writers.

pub mod blocks;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod loss;
pub mod network;
pub mod nn;
pub mod rng;
pub mod training;

mod checkpoint;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
