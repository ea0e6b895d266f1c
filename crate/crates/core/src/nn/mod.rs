//! Dense tensors, reverse-mode autodiff, the MLP layer set, AdamW and
//! soft target updates, and the checkpoint container.

pub mod checkpoint;
pub mod graph;
pub mod init;
pub mod mlp;
pub mod optim;
pub mod param;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{mish, Graph, Var};
pub use init::{orthogonal_init, uniform_fan_in};
pub use mlp::{Binding, Mlp, MlpSpec};
pub use optim::AdamW;
pub use param::{ema_blend, Param, ParamStore};
pub use tensor::Tensor;
