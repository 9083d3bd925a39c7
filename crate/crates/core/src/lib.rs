//! Low-rank metric learning from triplet constraints.
//!
//! A metric `M = LᵀL` of rank `d` is learned so that, under cosine similarity
//! of the embeddings `Y = L X`, every anchor sits closer to its positive than
//! to its negative by a margin. [`trainer::train`] solves the full-batch
//! problem on the Stiefel manifold; [`minibatch::train_minibatch`] streams
//! small batches for data too large for one SVD.

pub mod constraints;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod minibatch;
pub mod stiefel;
pub mod trainer;

pub use error::{Error, Result};
