//! Train a one-layer convolutional text classifier and explain what its
//! filters detect: per-filter thresholds, slot decompositions, ngram
//! clusters, negative ngrams, and per-prediction explanation tables.

pub mod artifact;
pub mod cli;
pub mod cluster;
pub mod corpus;
pub mod error;
pub mod model;
pub mod negation;
pub mod numerics;
pub mod report;
pub mod slots;
pub mod synthetic;
pub mod threshold;
pub mod train;

pub use error::{Error, Result};
