//! Minimal decoder-only language model over a synthetic multimodal task.
//!
//! Pre-norm residual blocks (RMS norm, grouped-query RoPE attention with the
//! optional pair gate, SiLU MLP), tied to a seeded key-value retrieval task
//! whose "image" is a span of pseudo-visual tokens.

mod checkpoint;
mod decode;
mod forward;
mod params;
mod task;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use decode::{argmax, decode_step, greedy_decode, Decoded, KvCache, StepOutput};
pub use forward::{
    backward_sequence, cross_entropy, forward_lm, forward_sequence, loss_and_grad, LmOutput,
    SequenceForward,
};
pub use params::{
    AttentionVariant, LayerParams, ModelParams, TensorView, TensorViewMut, ToyModel, ToyModelSpec,
};
pub use task::{
    answer_for, generate_task, TaskKind, TaskParams, ToyBatch, ToyExample, VocabLayout,
    NUM_SYSTEM_TOKENS,
};
pub use train::{batch_seed, evaluate, train, EvalReport, Optimizer, TrainParams};
