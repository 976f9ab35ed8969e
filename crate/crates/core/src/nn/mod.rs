//! The learned displacement model and the differentiation engine behind it.

pub mod checkpoint;
pub mod net;
pub mod tape;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT};
pub use net::{fuse, Forward, NetConfig, ParamStore, SpatioCoupledNet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
