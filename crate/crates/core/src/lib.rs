//! Open-vocabulary classifier construction.
//!
//! Classifiers are built from text-description embeddings (averaging), from
//! image-exemplar embeddings (a trained transformer set encoder, or a plain
//! mean), or from both (normalized sum). Banks of classifiers are scored with
//! a sigmoid head and evaluated with retrieval accuracy and COCO-style AP.

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregator;
pub mod benchmark;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod io;
pub mod numerics;
pub mod store;
pub mod synthetic;
pub mod text;
pub mod trainer;
pub mod visual;

pub use error::{Error, Result};
