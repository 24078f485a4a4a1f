//! Adversarial motif-based graph-convolutional social recommendation.
//!
//! A motif GCN generator proposes an alternative social neighborhood for every
//! user through a concrete (Gumbel-softmax) selector; an attentive ranking GCN
//! consumes those neighborhoods and acts as the discriminator. The two are
//! trained against each other on top of BPR and a profile-reconstruction loss.

pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod discriminator;
pub mod eval;
pub mod error;
pub mod experiment;
pub mod generator;
pub mod motif;
pub mod numerics;
pub mod sparse;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
pub use sparse::SparseMatrix;
