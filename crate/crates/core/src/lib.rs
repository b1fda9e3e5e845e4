//! Vision transformers over patch tokens with two attention mechanisms:
//! dense multi-head self-attention, and LSH bucketed attention stacked in
//! reversible residual blocks.
//!
//! Everything in this crate is pure computation over `alloc` containers and
//! builds without `std` (disable the default `std` feature). File formats,
//! timing and the command line live in the companion `visreformer` crate.
//!
//! Layout of the crate, bottom-up:
//!
//! - [`tensor`], [`rng`], [`graph`]: dense arrays, seeded random streams and
//!   a tape-based reverse-mode differentiator.
//! - [`tokenizer`]: convolutional stem, patch projection, positional rows.
//! - [`attention`]: dense attention, angular LSH hashing, bucket chunking
//!   and candidate-set attention, with exact score counters.
//! - [`revblocks`]: reversible residual blocks and chunked feed-forward.
//! - [`model`]: the two matched classifiers and their parameter layout.
//! - [`train`], [`metrics`], [`optim`]: AdamW, warmup+cosine, gradient
//!   accumulation and classification metrics.
//! - [`data`]: CIFAR-10 record decoding, synthetic sets, augmentation.
//! - [`bench`]: score-count sweeps, scaling fits and the capacity gate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attention;
pub mod bench;
pub mod data;
pub mod error;
pub mod fault;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod real;
pub mod revblocks;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use real::Real;
pub use rng::RngStream;
pub use tensor::Tensor;
