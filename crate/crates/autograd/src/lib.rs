//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! The operation set is deliberately small and fused where a transformer
//! needs it (attention, layer norm, cross-entropy, the clipped policy
//! surrogate) so a forward pass records tens of nodes rather than thousands.

pub mod gradcheck;
mod graph;
pub mod optim;
mod params;
pub mod tensor;

pub use graph::{policy_token_term, Graph, PolicyTokens, Var};
pub use optim::{AdamW, WarmupCosine};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;
