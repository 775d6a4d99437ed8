//! Pair-gated recalibration of attention over visual keys, built into a
//! minimal decoder-only transformer, plus segment-wise attention-mass
//! diagnostics.
//!
//! * [`attention`]: RoPE, causal softmax, grouped-query head sharing.
//! * [`gate`]: the per-layer pair gate, its variants and its gradients.
//! * [`diagnostics`]: segment maps, attention traces, mass curves, CSV export.
//! * [`model`]: toy multimodal language model, synthetic task, training and
//!   greedy decoding.
//! * [`cli`]: experiment driver behind the `rave` binary.

pub mod attention;
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod gate;
pub mod matrix;
pub mod model;

pub use error::{RaveError, Result};
pub use matrix::Matrix;
