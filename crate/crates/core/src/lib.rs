//! Mask-diffusion decoding for fixed-length character sequences.
//!
//! A small conditional transformer decoder is trained to recover a text
//! sequence from a noised copy of it while cross-attending to a per-character
//! feature grid. Training mixes seven mask strategies with a token-replacement
//! corruption branch; inference runs a K-step denoising loop under one of five
//! remask policies (parallel, auto-regressive, refinement, low-confidence and
//! block low-confidence).
//!
//! Module map:
//!
//! * [`vocab`]: character vocabulary with `[MASK]`/`[PAD]` specials.
//! * [`noising`]: training mask strategies and token replacement.
//! * [`scene`]: synthetic feature grids standing in for a visual encoder.
//! * [`model`]: the decoder, its hand-written backward pass and gradient check.
//! * [`training`]: losses, AdamW, the one-cycle schedule and the training loop.
//! * [`inference`]: the denoising loop and its remask policies.
//! * [`harness`]: configuration, checkpoints, evaluation and the ablation driver.

pub mod error;
pub mod harness;
pub mod inference;
pub mod model;
pub mod noising;
pub mod rng;
pub mod scene;
pub mod training;
pub mod vocab;

#[cfg(feature = "cli")]
pub mod cli;

pub use error::{Error, Result};
pub use vocab::{TokenId, TokenSeq, Vocab};
