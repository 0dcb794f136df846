//! Personalized federated learning for clients whose raw features live in
//! spaces of different dimension.
//!
//! Each client learns an embedding into a shared latent space whose
//! class-conditional distributions are pulled toward learnable Gaussian
//! anchors (closed-form 2-Wasserstein alignment), while a shared
//! representation and per-client heads are trained FedRep-style. A separate
//! linear-regression harness checks the subspace-recovery behaviour of the
//! scheme against known ground truth.

pub mod aggregate;
pub mod anchors;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod gaussian;
pub mod neural;
pub mod rng;
mod serde_matrix;
pub mod theory;

pub use error::{FlicError, Result};
