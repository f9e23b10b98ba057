//! Exact finite-width kernel models of neural networks.
//!
//! Hermite transforms of activations, the global dual with its norm bounds and
//! Rademacher bounds, the local dual of a weight step, the NNGP/NTK/LiNK
//! kernels, and the LeNK representor sums for gradient-descent steps.

pub mod error;
pub mod families;
pub mod global_dual;
pub mod hermite;
pub mod kernels;
pub mod lenk;
pub mod local_dual;
pub mod netgraph;
pub mod numerics;
pub mod oracle;
pub mod par;

pub use error::{NkError, Result};
