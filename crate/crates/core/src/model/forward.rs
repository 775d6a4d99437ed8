//! Full-sequence forward pass, cross-entropy loss and hand-written backward
//! pass of the toy model.

use rayon::prelude::*;

use super::params::{LayerParams, ModelParams, ToyModel};
use super::task::{ToyBatch, ToyExample};
use crate::attention::GqaMap;
use crate::diagnostics::{AttentionTrace, Segment, SegmentMap};
use crate::error::{RaveError, Result};
use crate::gate::{gate_gradients, rave_attention_forward, HeadForward};
use crate::matrix::Matrix;

pub(crate) struct NormCache {
    normed: Matrix,
    inv_rms: Vec<f64>,
}

/// RMS normalization of each row followed by an elementwise gain.
pub(crate) fn rms_norm(x: &Matrix, gain: &[f64], eps: f64) -> (Matrix, NormCache) {
    let d = x.cols();
    let mut normed = Matrix::zeros(x.rows(), d);
    let mut out = Matrix::zeros(x.rows(), d);
    let mut inv_rms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        inv_rms.push(inv);
        for c in 0..d {
            let n = row[c] * inv;
            normed.set(r, c, n);
            out.set(r, c, n * gain[c]);
        }
    }
    (out, NormCache { normed, inv_rms })
}

fn rms_norm_backward(
    cache: &NormCache,
    gain: &[f64],
    d_out: &Matrix,
    d_gain: &mut [f64],
) -> Matrix {
    let d = d_out.cols();
    let mut dx = Matrix::zeros(d_out.rows(), d);
    for r in 0..d_out.rows() {
        let xhat = cache.normed.row(r);
        let dy = d_out.row(r);
        let mut proj = 0.0;
        for c in 0..d {
            d_gain[c] += dy[c] * xhat[c];
            proj += dy[c] * gain[c] * xhat[c];
        }
        proj /= d as f64;
        let inv = cache.inv_rms[r];
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = inv * (dy[c] * gain[c] - xhat[c] * proj);
        }
    }
    dx
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

struct LayerCache {
    h_attn: Matrix,
    attn_norm: NormCache,
    heads: Vec<HeadForward>,
    concat: Matrix,
    h_mlp: Matrix,
    mlp_norm: NormCache,
    up: Matrix,
    act: Matrix,
}

/// Intermediate state of one full-sequence forward pass.
pub struct SequenceForward {
    pub logits: Matrix,
    tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    h_final: Matrix,
    final_norm: NormCache,
}

impl SequenceForward {
    /// Final attention matrix of `head` at `layer`.
    pub fn attention(&self, layer: usize, head: usize) -> &Matrix {
        &self.layers[layer].heads[head].attn
    }

    pub fn head(&self, layer: usize, head: usize) -> &HeadForward {
        &self.layers[layer].heads[head]
    }

    /// Attention rows of every answer position, as a trace.
    pub fn answer_trace(&self, segments: &SegmentMap) -> Result<AttentionTrace> {
        let num_heads = self.layers.first().map_or(0, |l| l.heads.len());
        let mut trace = AttentionTrace::new(self.layers.len(), num_heads);
        for &t in segments.indices(Segment::Answer) {
            let rows = self
                .layers
                .iter()
                .map(|l| {
                    l.heads
                        .iter()
                        .map(|h| h.attn.row(t)[..=t].to_vec())
                        .collect()
                })
                .collect();
            trace.record(t, rows)?;
        }
        Ok(trace)
    }
}

fn attention_block(
    model: &ToyModel,
    layer: usize,
    p: &LayerParams,
    h: &Matrix,
    positions: &[usize],
    segments: &SegmentMap,
) -> Result<(Vec<HeadForward>, Matrix)> {
    let a = &model.spec.attention;
    let gqa = GqaMap::new(a.n_q_heads, a.n_kv_heads)?;
    let q_all = h.matmul(&p.wq)?;
    let k_all = h.matmul(&p.wk)?;
    let v_all = h.matmul(&p.wv)?;
    let gate = model.params.gates.layer(layer)?;
    let mut heads = Vec::with_capacity(a.n_q_heads);
    let mut concat = Matrix::zeros(h.rows(), a.n_q_heads * a.d_v);
    for head in 0..a.n_q_heads {
        let kv = gqa.kv_head(head);
        let fwd = rave_attention_forward(
            &q_all.column_block(head * a.d_k, a.d_k),
            &k_all.column_block(kv * a.d_k, a.d_k),
            &v_all.column_block(kv * a.d_v, a.d_v),
            positions,
            gate,
            head,
            model.partition(),
            a,
            segments,
        )?;
        concat.add_column_block(head * a.d_v, &fwd.output);
        heads.push(fwd);
    }
    Ok((heads, concat))
}

/// Runs the model over one whole sequence (positions `0..N`).
pub fn forward_sequence(
    model: &ToyModel,
    tokens: &[u32],
    segments: &SegmentMap,
) -> Result<SequenceForward> {
    let spec = &model.spec;
    let n = tokens.len();
    if n == 0 {
        return Err(RaveError::Dimension("empty sequence".into()));
    }
    if n > spec.max_seq_len {
        return Err(RaveError::SequenceTooLong {
            len: n,
            max: spec.max_seq_len,
        });
    }
    if segments.len() != n {
        return Err(RaveError::Dimension(format!(
            "segment map covers {} positions, sequence has {n}",
            segments.len()
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= spec.vocab_size) {
        return Err(RaveError::Vocabulary(format!(
            "token {bad} outside vocabulary of {}",
            spec.vocab_size
        )));
    }
    let params = &model.params;
    let positions: Vec<usize> = (0..n).collect();
    let eps = spec.norm_eps;

    let mut x = Matrix::from_fn(n, spec.attention.d_model, |r, c| {
        params.embed.get(tokens[r] as usize, c)
    });
    let mut layers = Vec::with_capacity(params.layers.len());
    for (l, p) in params.layers.iter().enumerate() {
        let (h_attn, attn_norm) = rms_norm(&x, &p.attn_norm, eps);
        let (heads, concat) = attention_block(model, l, p, &h_attn, &positions, segments)?;
        x.add_assign(&concat.matmul(&p.wo)?);

        let (h_mlp, mlp_norm) = rms_norm(&x, &p.mlp_norm, eps);
        let up = h_mlp.matmul(&p.w_up)?;
        let act = Matrix::from_fn(up.rows(), up.cols(), |r, c| silu(up.get(r, c)));
        x.add_assign(&act.matmul(&p.w_down)?);
        layers.push(LayerCache {
            h_attn,
            attn_norm,
            heads,
            concat,
            h_mlp,
            mlp_norm,
            up,
            act,
        });
    }
    let (h_final, final_norm) = rms_norm(&x, &params.final_norm, eps);
    let logits = h_final.matmul(&params.lm_head)?;
    if !logits.is_finite() {
        return Err(RaveError::NonFinite("logits".into()));
    }
    Ok(SequenceForward {
        logits,
        tokens: tokens.to_vec(),
        layers,
        h_final,
        final_norm,
    })
}

/// Summed cross-entropy over target positions, its count, and the adjoint of
/// the summed loss w.r.t. the logits.
pub fn cross_entropy(logits: &Matrix, targets: &[Option<u32>]) -> Result<(f64, usize, Matrix)> {
    if targets.len() != logits.rows() {
        return Err(RaveError::Dimension(format!(
            "{} targets for {} logit rows",
            targets.len(),
            logits.rows()
        )));
    }
    let mut total = 0.0;
    let mut count = 0;
    let mut d_logits = Matrix::zeros(logits.rows(), logits.cols());
    for (i, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        let t = t as usize;
        if t >= logits.cols() {
            return Err(RaveError::Vocabulary(format!(
                "target {t} outside vocabulary"
            )));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[t];
        count += 1;
        let d = d_logits.row_mut(i);
        for (j, z) in row.iter().enumerate() {
            d[j] = (z - lse).exp();
        }
        d[t] -= 1.0;
    }
    Ok((total, count, d_logits))
}

/// Gradient of a scalar `sum_ij d_logits_ij * logits_ij` w.r.t. every parameter.
pub fn backward_sequence(
    model: &ToyModel,
    fwd: &SequenceForward,
    d_logits: &Matrix,
) -> Result<ModelParams> {
    let spec = &model.spec;
    let a = &spec.attention;
    let params = &model.params;
    let gqa = GqaMap::new(a.n_q_heads, a.n_kv_heads)?;
    let mut grads = ModelParams::zeros(spec);

    grads.lm_head = fwd.h_final.t_matmul(d_logits)?;
    let d_h = d_logits.matmul_t(&params.lm_head)?;
    let mut dx = rms_norm_backward(
        &fwd.final_norm,
        &params.final_norm,
        &d_h,
        &mut grads.final_norm,
    );

    for (l, (p, cache)) in params.layers.iter().zip(&fwd.layers).enumerate().rev() {
        let g = &mut grads.layers[l];
        // MLP residual branch.
        g.w_down = cache.act.t_matmul(&dx)?;
        let d_act = dx.matmul_t(&p.w_down)?;
        let d_up = Matrix::from_fn(d_act.rows(), d_act.cols(), |r, c| {
            d_act.get(r, c) * silu_grad(cache.up.get(r, c))
        });
        g.w_up = cache.h_mlp.t_matmul(&d_up)?;
        let d_h_mlp = d_up.matmul_t(&p.w_up)?;
        dx.add_assign(&rms_norm_backward(
            &cache.mlp_norm,
            &p.mlp_norm,
            &d_h_mlp,
            &mut g.mlp_norm,
        ));

        // Attention residual branch.
        g.wo = cache.concat.t_matmul(&dx)?;
        let d_concat = dx.matmul_t(&p.wo)?;
        let n = dx.rows();
        let mut d_q_all = Matrix::zeros(n, a.n_q_heads * a.d_k);
        let mut d_k_all = Matrix::zeros(n, a.n_kv_heads * a.d_k);
        let mut d_v_all = Matrix::zeros(n, a.n_kv_heads * a.d_v);
        let gg = &mut grads.gates.layers[l];
        for (head, hf) in cache.heads.iter().enumerate() {
            let kv = gqa.kv_head(head);
            let hg = gate_gradients(hf, &d_concat.column_block(head * a.d_v, a.d_v))?;
            d_q_all.add_column_block(head * a.d_k, &hg.d_q_bar);
            d_k_all.add_column_block(kv * a.d_k, &hg.d_k_bar);
            d_v_all.add_column_block(kv * a.d_v, &hg.d_v);
            for (x, d) in gg.w_q.iter_mut().zip(&hg.d_gate_q) {
                *x += d;
            }
            for (x, d) in gg.w_k.iter_mut().zip(&hg.d_gate_k) {
                *x += d;
            }
        }
        g.wq = cache.h_attn.t_matmul(&d_q_all)?;
        g.wk = cache.h_attn.t_matmul(&d_k_all)?;
        g.wv = cache.h_attn.t_matmul(&d_v_all)?;
        let mut d_h_attn = d_q_all.matmul_t(&p.wq)?;
        d_h_attn.add_assign(&d_k_all.matmul_t(&p.wk)?);
        d_h_attn.add_assign(&d_v_all.matmul_t(&p.wv)?);
        dx.add_assign(&rms_norm_backward(
            &cache.attn_norm,
            &p.attn_norm,
            &d_h_attn,
            &mut g.attn_norm,
        ));
    }

    for (r, &t) in fwd.tokens.iter().enumerate() {
        for (d, s) in grads.embed.row_mut(t as usize).iter_mut().zip(dx.row(r)) {
            *d += s;
        }
    }
    Ok(grads)
}

/// Result of [`forward_lm`].
pub struct LmOutput {
    pub logits: Vec<Matrix>,
    /// Mean cross-entropy over all answer targets in the batch.
    pub loss: f64,
    pub traces: Option<Vec<AttentionTrace>>,
}

/// Forward pass over a batch, with the loss masked to answer targets.
pub fn forward_lm(model: &ToyModel, batch: &ToyBatch, capture_trace: bool) -> Result<LmOutput> {
    let per_seq: Vec<(Matrix, f64, usize, Option<AttentionTrace>)> = batch
        .examples
        .par_iter()
        .map(|ex| {
            let fwd = forward_sequence(model, &ex.tokens, &ex.segments)?;
            let (loss, count, _) = cross_entropy(&fwd.logits, &ex.targets)?;
            let trace = capture_trace
                .then(|| fwd.answer_trace(&ex.segments))
                .transpose()?;
            Ok((fwd.logits, loss, count, trace))
        })
        .collect::<Result<_>>()?;
    let (total, count) = per_seq
        .iter()
        .fold((0.0, 0), |(t, c), s| (t + s.1, c + s.2));
    let loss = if count == 0 {
        0.0
    } else {
        total / count as f64
    };
    let traces = capture_trace.then(|| {
        per_seq
            .iter()
            .map(|s| s.3.clone().expect("trace captured"))
            .collect()
    });
    Ok(LmOutput {
        logits: per_seq.into_iter().map(|s| s.0).collect(),
        loss,
        traces,
    })
}

/// Mean answer loss over the batch and its gradient. Per-sequence work runs in
/// parallel; gradients are reduced in sequence order.
pub fn loss_and_grad(model: &ToyModel, examples: &[ToyExample]) -> Result<(f64, ModelParams)> {
    let per_seq: Vec<(f64, usize, ModelParams)> = examples
        .par_iter()
        .map(|ex| {
            let fwd = forward_sequence(model, &ex.tokens, &ex.segments)?;
            let (loss, count, d_logits) = cross_entropy(&fwd.logits, &ex.targets)?;
            let grads = backward_sequence(model, &fwd, &d_logits)?;
            Ok((loss, count, grads))
        })
        .collect::<Result<_>>()?;
    let count: usize = per_seq.iter().map(|s| s.1).sum();
    if count == 0 {
        return Err(RaveError::Config("batch has no answer targets".into()));
    }
    let scale = 1.0 / count as f64;
    let mut total = 0.0;
    let mut grads = ModelParams::zeros(&model.spec);
    for (loss, _, g) in &per_seq {
        total += loss;
        grads.add_scaled(g, scale);
    }
    Ok((total * scale, grads))
}
