use serde::{Deserialize, Serialize};

use super::decode::greedy_decode;
use super::forward::{forward_lm, loss_and_grad};
use super::params::{ModelParams, ToyModel, ToyModelSpec};
use super::task::{generate_task, TaskParams};
use crate::diagnostics::{MassProfile, Segment};
use crate::error::{RaveError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    /// Seed of the per-step training batches.
    pub data_seed: u64,
}

/// Seed of the batch used at `step`.
pub fn batch_seed(data_seed: u64, step: usize) -> u64 {
    data_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(step as u64)
}

struct AdamState {
    m: ModelParams,
    v: ModelParams,
    t: i32,
}

/// Updates `params` in place from `grads`.
struct Stepper {
    opt: Optimizer,
    adam: Option<AdamState>,
}

impl Stepper {
    fn new(opt: Optimizer, spec: &ToyModelSpec) -> Self {
        let adam = matches!(opt, Optimizer::Adam { .. }).then(|| AdamState {
            m: ModelParams::zeros(spec),
            v: ModelParams::zeros(spec),
            t: 0,
        });
        Stepper { opt, adam }
    }

    fn apply(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        match self.opt {
            Optimizer::Sgd { lr } => params.add_scaled(grads, -lr),
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let st = self.adam.as_mut().expect("adam state");
                st.t += 1;
                let c1 = 1.0 - beta1.powi(st.t);
                let c2 = 1.0 - beta2.powi(st.t);
                let tensors = params.tensors_mut().into_iter().zip(grads.tensors());
                let moments = st.m.tensors_mut().into_iter().zip(st.v.tensors_mut());
                for ((p, g), (m, v)) in tensors.zip(moments) {
                    for i in 0..p.data.len() {
                        let gi = g.data[i];
                        m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * gi;
                        v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * gi * gi;
                        let mh = m.data[i] / c1;
                        let vh = v.data[i] / c2;
                        p.data[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Trains `model` in place and returns the per-step loss (measured before
/// each update). Aborts on a non-finite loss.
pub fn train(
    model: &mut ToyModel,
    task: &TaskParams,
    params: &TrainParams,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if params.batch_size == 0 {
        return Err(RaveError::Config("batch_size must be positive".into()));
    }
    let mut stepper = Stepper::new(params.optimizer, &model.spec);
    let mut losses = Vec::with_capacity(params.steps);
    for step in 0..params.steps {
        let batch = generate_task(
            task,
            model.spec.vocab_size,
            params.batch_size,
            batch_seed(params.data_seed, step),
        )?;
        let (loss, grads) = loss_and_grad(model, &batch.examples)?;
        if !loss.is_finite() {
            return Err(RaveError::Diverged {
                step: step + 1,
                loss,
            });
        }
        stepper.apply(&mut model.params, &grads);
        losses.push(loss);
        on_step(step + 1, loss);
    }
    Ok(losses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub loss: f64,
    /// Fraction of prompts whose greedy answer matches exactly.
    pub accuracy: f64,
    /// Mean layer-averaged image mass over all answer steps and prompts.
    pub mean_alpha_img: f64,
}

/// Held-out evaluation on `num_examples` fresh sequences from `seed`.
pub fn evaluate(
    model: &ToyModel,
    task: &TaskParams,
    num_examples: usize,
    seed: u64,
) -> Result<EvalReport> {
    let batch = generate_task(task, model.spec.vocab_size, num_examples, seed)?;
    let loss = forward_lm(model, &batch, false)?.loss;
    let mut correct = 0usize;
    let mut alpha_img = 0.0;
    for ex in &batch.examples {
        let prompt_segments = ex.segments.prompt_only();
        let dec = greedy_decode(model, ex.prompt(), &prompt_segments, task.answer_len, true)?;
        if dec.tokens == ex.answer() {
            correct += 1;
        }
        let trace = dec.trace.expect("trace requested");
        alpha_img += MassProfile::from_trace(&trace, &dec.segments)?.mean(Segment::Image);
    }
    let n = batch.examples.len().max(1) as f64;
    Ok(EvalReport {
        loss,
        accuracy: correct as f64 / n,
        mean_alpha_img: alpha_img / n,
    })
}
