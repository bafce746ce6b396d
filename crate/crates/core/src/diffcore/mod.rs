//! Dense tensors, a reverse-mode tape, Adam, and checkpoint I/O.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{
    checkpoint_id, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint,
    CheckpointHeader, ParamEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use graph::{Elementwise, Graph, Var};
pub use params::{Gradients, ParamId, ParameterStore};
pub use tensor::{log_softmax_slice, matmul, sigmoid, softmax, softmax_slice, Tensor};
