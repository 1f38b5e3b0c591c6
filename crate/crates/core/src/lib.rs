//! Unsupervised hard training-example mining on data manifolds.
//!
//! The pipeline runs in a fixed order:
//!
//! 1. [`features`]: load, generate, normalize and whiten feature vectors.
//! 2. [`graph`]: reciprocal kNN graph with `[x·y]₊³` edge weights and its
//!    symmetric / stochastic normalizations.
//! 3. [`diffusion`]: per-anchor conjugate-gradient solves of
//!    `(I − αÂ) f = (1 − α) e_i`, giving manifold similarity columns.
//! 4. [`anchors`]: stationary distribution of the graph random walk and its
//!    local maxima.
//! 5. [`mining`]: positive pools (manifold but not Euclidean neighbors) and
//!    negative pools (Euclidean but not manifold neighbors), plus per-epoch
//!    tuple sampling.
//! 6. [`trainer`]: a small embedding trained with contrastive or triplet loss.
//! 7. [`eval`]: Recall@k, NMI and mAP against held labels.
//!
//! [`pipeline`] chains the stages and [`cli`] exposes them as subcommands.

// `!(x > 0.0)` is the idiom used throughout to reject NaN along with bad values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anchors;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod features;
pub mod graph;
pub mod mining;
pub mod pipeline;
pub mod trainer;

mod embeddings;

pub use embeddings::Embeddings;
pub use error::{Error, Result};
