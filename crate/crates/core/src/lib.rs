//! Representation learning for feature-grid slides.
//!
//! A slide is a sparse 2D grid of pre-extracted patch feature vectors. This
//! crate provides everything needed to train and evaluate grid encoders on
//! such data without touching the filesystem:
//!
//! - [`tensor`] and [`graph`]: a small f64 tensor type plus a tape-based
//!   reverse-mode autodiff graph with fused attention and normalization ops.
//! - [`optim`]: AdamW with decoupled weight decay, cosine schedules, EMA.
//! - [`grid`]: the feature-grid container, tissue grouping, crop and view
//!   sampling, feature-space augmentation.
//! - [`encoder`]: a pre-norm transformer over grid cells with distance-based
//!   attention bias (2D ALiBi) and pluggable positional schemes.
//! - [`ibot`]: masked self-distillation pretraining (student/teacher, EMA,
//!   centering, masked-token prediction).
//! - [`text`], [`align`], [`decode`]: caption tokenizer and transformer,
//!   contrastive + captioning alignment, beam search decoding.
//! - [`eval`]: linear probe, prototype classifiers, zero/few-shot, survival,
//!   classification and text metrics, bootstrap confidence intervals.
//! - [`retrieval`]: centered-L2 slide retrieval with fixed tie-breaking.
//!
//! Everything is deterministic given a seed: computation is sequential f64,
//! parameters live in ordered maps, and all randomness is drawn from named
//! ChaCha20 streams derived from a single root seed (see [`rng`]).
//!
//! The crate is `no_std` (with `alloc`); IO, file formats, and the command
//! line driver live in the companion `gridslide` crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod align;
pub mod decode;
pub mod encoder;
mod error;
pub mod eval;
pub mod fm;
pub mod graph;
pub mod grid;
pub mod ibot;
pub mod optim;
pub mod params;
pub mod retrieval;
pub mod rng;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
pub use tensor::Tensor;
