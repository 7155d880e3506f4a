//! Fusion-based hierarchical indexing and cascaded retrieval for biometric
//! identification over fixed-dimension embeddings.
//!
//! Reference templates are paired by a global-cost assignment, fused into
//! binary trees, and searched top-down so that a probe is compared with far
//! fewer templates than an exhaustive 1:N search. Comparisons can run
//! against protected (encrypted) templates through a pluggable backend.

pub mod cli;
pub mod data_io;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod index;
pub mod model;
pub mod pairing;
pub mod protection;
pub mod retrieval;

pub use error::{Error, Result};
