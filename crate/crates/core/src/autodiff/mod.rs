//! Small reverse-mode differentiation engine over row-major matrices.
//!
//! Only the primitives the phase transformer and its loss need are provided.
//! A [`Tape`] is rebuilt for every forward pass; nodes are appended in
//! execution order so a reverse sweep over the node list is a valid
//! topological order for backpropagation.

mod adam;
mod checkpoint;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
