//! Hierarchical Bayesian physics-informed networks for linear imaging inverse
//! problems (deblurring and super-resolution), with a closed-form Gaussian
//! posterior for comparison and MC-dropout uncertainty maps.
//!
//! The pieces, bottom up:
//!
//! - [`forward_ops`]: matrix-free blur and downsampling operators with exact adjoints.
//! - [`analytic_bayes`]: posterior mean by conjugate gradients, variance diagonal
//!   by dense inversion or Hutchinson probing.
//! - [`neural_net`]: a small CNN with manual backpropagation.
//! - [`losses`], [`trainer`]: supervised and physics-only criteria, Adam/SGD loop.
//! - [`uq_inference`]: MC-dropout mean and variance.
//! - [`datagen`]: synthetic heat-blob scenes and observations.
//! - [`cli`]: the `bpinn` command line.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod analytic_bayes;
mod binfmt;
pub mod checkpoint;
pub mod checks;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod forward_ops;
pub mod grid;
pub mod image_io;
pub mod losses;
pub mod metrics;
pub mod neural_net;
pub mod rng;
pub mod trainer;
pub mod uq_inference;

pub use error::{Error, FormatError, Result};
pub use grid::ImageGrid;
