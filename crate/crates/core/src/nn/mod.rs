//! Minimal differentiable numerical core.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::{read_checkpoint, restore_params, write_checkpoint, Checkpoint};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{AttendMask, Gradients, Graph, Var};
pub use layers::{
    perceiver_resample, transformer_forward, Perceiver, PerceiverConfig, TransformerConfig,
    TransformerStack,
};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
