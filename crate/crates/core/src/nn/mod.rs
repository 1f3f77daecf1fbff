//! Small differentiable-network toolkit: dense layers, causal single-head
//! attention, tape-based reverse-mode gradients, Adam and EMA target updates.

pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
mod tensor;

pub use checkpoint::TensorFile;
pub use graph::{Bound, Graph, NodeId};
pub use layers::{
    forward_attention_block, forward_mlp, forward_self_attention, AttentionBlock, Linear, Mlp,
    SelfAttention,
};
pub use optim::{ema_update, Adam};
pub use params::{Gradients, ParamSet};
pub use tensor::Tensor;
