//! Amortized structural regularization for an iterative multi-object
//! generative model: the model pair, constraint penalties, training,
//! synthetic scene data, evaluation and figure rendering.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod canvas;
pub mod checkpoint;
pub mod config;
pub mod constraints;
pub mod data;
pub mod error;
pub mod generative;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod recognition;
pub mod render;
pub mod tape;
pub mod training;
