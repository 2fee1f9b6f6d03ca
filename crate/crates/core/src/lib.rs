//! Deterministic simulator for prototype-based federated learning with
//! frozen feature backbones.
//!
//! Clients hold precomputed (or synthetic) embedding datasets standing in
//! for frozen backbone outputs, train small projection networks locally,
//! and share class prototypes instead of model parameters. The crate covers
//! the full protocol — prototype computation, server aggregation, padding,
//! prototype-wise contrastive training — together with parameter-averaging
//! baselines, non-IID partitioners, communication accounting, and the
//! evaluation/fairness/bound machinery. Everything is reproducible
//! bit-for-bit from a seed, including under client parallelism.

pub mod error;
pub mod linalg;
pub mod losses;
pub mod projector;
pub mod prototypes;

pub use error::{Error, Result};
