//! Small tape-based autodiff over [`ndarray`], plus the bits of training
//! infrastructure the workspace shares: deterministic RNG substreams, an
//! Adam optimizer, a binary checkpoint container, numeric gradient checks,
//! and order-preserving parallel map helpers.
//!
//! The design goal is bit-reproducibility: every source of randomness is a
//! counter-derived ChaCha substream, parallel maps preserve item order and
//! all reductions run sequentially, so results do not depend on thread count.

pub mod ckpt;
pub mod elem;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod ops;
pub mod opt;
pub mod par;
pub mod rng;

pub use elem::Elem;
pub use graph::{Grads, Graph, Id, Params};

/// Errors from checkpoint serialization and parameter-store lookups.
#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint container: {0}")]
    BadContainer(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
}
