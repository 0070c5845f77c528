//! Learning to defer with a small number of expert predictions.
//!
//! The crate trains an embedding model on ground-truth labels, learns whether a
//! particular expert is correct from a handful of that expert's predictions
//! (supervised or semi-supervised on top of the frozen embedding), fills in artificial
//! expert predictions for every other training instance, and trains and evaluates
//! learning-to-defer algorithms on the completed data.

pub mod artificial;
pub mod augment;
pub mod dataset;
pub mod defer;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod expertise;
pub mod nn;
pub mod seed;
pub mod synthetic_expert;

pub use error::{Error, Result};
