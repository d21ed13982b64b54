//! Self-supervised multiview embedding lab.
//!
//! Trains unit-norm embeddings of multiview object observations with
//! stochastic object prototypes and multiview KL-consistency, and evaluates
//! them with open-set protocols (KNN, recall@K, k-means/NMI, few-shot).

pub mod dataio;
pub mod embedder;
pub mod error;
pub mod evalsuite;
pub mod losses;
pub mod protobank;
pub mod trainer;

pub use error::{Result, VispeError};
