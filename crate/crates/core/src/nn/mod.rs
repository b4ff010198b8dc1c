//! Dense-tensor reverse-mode autodiff, gradient reversal and Adam.

mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{Graph, Var};
pub use optim::{AdamConfig, AdamState};
pub use params::{Checkpoint, CheckpointEntry, Grads, ParamStore, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use tensor::{logsumexp, Tensor};

#[cfg(test)]
mod tests;
