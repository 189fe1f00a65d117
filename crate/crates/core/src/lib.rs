//! Deep multi-instance learning for patch-based image classification.
//!
//! An image is cut into patches, each patch is scored by one shared
//! convolutional network, and the scores are combined by a permutation-invariant
//! pooling operator (max, Noisy-Or, ISR or log-sum-exp) into the probability
//! that the whole bag is positive. Training minimizes the Bernoulli negative
//! log-likelihood of bag labels end to end.

pub mod augment;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pooling;
pub mod train;

pub use error::{Error, Result};
