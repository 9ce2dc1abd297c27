//! Desk-scale, fully deterministic heterogeneous SparseLoCo training.
//!
//! The crate simulates data-parallel training with infrequent synchronization
//! (local AdamW steps, chunked top-k pseudo-gradient exchange with error
//! feedback) where each replica is either a monolithic worker or a pipeline of
//! stages whose inter-stage activations travel through a low-dimensional
//! orthonormal subspace. An analytic bandwidth/utilization model covers the
//! regimes that are not desk-reproducible.
//!
//! Everything is driven by explicit seeds and fixed reduction orders, so runs
//! are bitwise reproducible at any thread count.

pub mod error;
pub mod hetero;
pub mod linalg;
pub mod model;
pub mod perfmodel;
pub mod sparseloco;
pub mod subspace;
pub mod topk;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::{RngStream, Scalar, Tensor};
