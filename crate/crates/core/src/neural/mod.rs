//! Small differentiable model stack: dense networks with explicit
//! backpropagation, the classification and alignment losses, and Adam.

pub mod adam;
pub mod loss;
pub mod mlp;

pub use adam::{AdamConfig, AdamState};
pub use loss::{alignment_loss_grad, class_alignment_loss_grad, cross_entropy};
pub use mlp::{Activation, Dense, ForwardCache, LayerGrad, MlpGrads, MlpParams};
