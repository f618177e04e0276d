//! Differentiable compute core.
//!
//! Forward computation is eager: every operation recorded on a [`Graph`]
//! computes its value immediately and remembers what it needs for the
//! reverse sweep. Parameters live in a [`ParamStore`] that graphs borrow
//! read-only; [`Graph::backward`] returns a [`Gradients`] buffer that is
//! folded into the store afterwards, so several graphs can be evaluated in
//! parallel against the same store.

mod adam;
mod array;
mod checkpoint;
mod gradcheck;
mod graph;
mod layers;
mod params;

pub use adam::{Adam, AdamConfig};
pub use array::{DType, DenseArray, Real};
pub use checkpoint::{decode as decode_checkpoint, read_checkpoint, write_checkpoint, CheckpointEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId};
pub use layers::{ConvBank, Embedding, Linear, Lstm};
pub use params::{Init, ParamId, ParamStore, INIT_SCALE};
