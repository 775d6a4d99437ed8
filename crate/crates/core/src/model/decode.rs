//! Greedy decoding with a key/value cache.
//!
//! The cached step reproduces the full-sequence forward pass row by row using
//! the same kernels and reduction order, so cached and re-forward logits
//! agree bit for bit.

use super::forward::{rms_norm, silu};
use super::params::ToyModel;
use crate::attention::{rope_inv_freq, rotate_row, scaled_dot, GateStage, GqaMap};
use crate::diagnostics::{AttentionTrace, Segment, SegmentMap};
use crate::error::{RaveError, Result};
use crate::gate::{attend_row, Recalibration, VisualKeyMask};
use crate::matrix::{dot, Matrix};

struct LayerKv {
    /// Rotated keys per key/value head.
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
    /// Gate key scores `K̄_j · w_k` per key/value head.
    key_scores: Vec<Vec<f64>>,
}

/// Per-layer key/value cache for one sequence.
pub struct KvCache {
    layers: Vec<LayerKv>,
    len: usize,
}

impl KvCache {
    pub fn new(model: &ToyModel) -> Self {
        let a = &model.spec.attention;
        let layers = (0..a.num_layers)
            .map(|_| LayerKv {
                keys: vec![Matrix::zeros(0, a.d_k); a.n_kv_heads],
                values: vec![Matrix::zeros(0, a.d_v); a.n_kv_heads],
                key_scores: vec![Vec::new(); a.n_kv_heads],
            })
            .collect();
        KvCache { layers, len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Output of one cached step.
pub struct StepOutput {
    pub logits: Vec<f64>,
    /// `[layer][head]` attention rows of this query, when requested.
    pub rows: Option<Vec<Vec<Vec<f64>>>>,
}

/// Feeds `token` at the next position. `segments` must already cover that
/// position.
pub fn decode_step(
    model: &ToyModel,
    cache: &mut KvCache,
    token: u32,
    segments: &SegmentMap,
    record: bool,
) -> Result<StepOutput> {
    let spec = &model.spec;
    let a = &spec.attention;
    let pos = cache.len;
    if pos >= spec.max_seq_len {
        return Err(RaveError::SequenceTooLong {
            len: pos + 1,
            max: spec.max_seq_len,
        });
    }
    if segments.len() <= pos {
        return Err(RaveError::Dimension(format!(
            "segment map does not cover position {pos}"
        )));
    }
    if token as usize >= spec.vocab_size {
        return Err(RaveError::Vocabulary(format!(
            "token {token} outside vocabulary of {}",
            spec.vocab_size
        )));
    }
    let params = &model.params;
    let gqa = GqaMap::new(a.n_q_heads, a.n_kv_heads)?;
    let inv_freq = rope_inv_freq(a.d_k, a.rope_base);
    let scale = (a.d_k as f64).sqrt();
    let visual = VisualKeyMask::from_segments(segments);
    let recal = Recalibration::from(a);
    let row_gated = match a.stage {
        GateStage::PrefillAndDecode => true,
        GateStage::DecodeOnly => segments.contains(Segment::Answer, pos),
    };
    let eps = spec.norm_eps;

    let mut x = Matrix::from_vec(1, a.d_model, params.embed.row(token as usize).to_vec())?;
    let mut rows = record.then(Vec::new);
    for (l, p) in params.layers.iter().enumerate() {
        let gate = params.gates.layer(l)?;
        let (h, _) = rms_norm(&x, &p.attn_norm, eps);
        let q_all = h.matmul(&p.wq)?;
        let k_all = h.matmul(&p.wk)?;
        let v_all = h.matmul(&p.wv)?;
        let kv = &mut cache.layers[l];
        for g in 0..a.n_kv_heads {
            let k_bar = &k_all.row(0)[g * a.d_k..(g + 1) * a.d_k];
            let mut k_rot = k_bar.to_vec();
            rotate_row(&mut k_rot, pos, &inv_freq, 1.0);
            kv.keys[g].push_row(&k_rot)?;
            kv.values[g].push_row(&v_all.row(0)[g * a.d_v..(g + 1) * a.d_v])?;
            kv.key_scores[g].push(dot(k_bar, &gate.w_k));
        }

        let mut concat = Matrix::zeros(1, a.n_q_heads * a.d_v);
        let mut layer_rows = Vec::with_capacity(a.n_q_heads);
        for head in 0..a.n_q_heads {
            let g = gqa.kv_head(head);
            let q_bar = &q_all.row(0)[head * a.d_k..(head + 1) * a.d_k];
            let mut q = q_bar.to_vec();
            rotate_row(&mut q, pos, &inv_freq, 1.0);
            let keys = &kv.keys[g];
            let logits: Vec<f64> = (0..=pos)
                .map(|j| scaled_dot(&q, keys.row(j), scale))
                .collect();
            let gate_row: Option<Vec<f64>> =
                (model.partition().contains(head) && row_gated).then(|| {
                    let s_q = dot(q_bar, &gate.w_q);
                    kv.key_scores[g]
                        .iter()
                        .map(|&s_k| a.phi.apply(s_q * s_k))
                        .collect()
                });
            let row = attend_row(&logits, gate_row.as_deref(), &visual, recal, pos)?;
            let out = crate::attention::mix_values(&row.probs, &kv.values[g]);
            concat.row_mut(0)[head * a.d_v..(head + 1) * a.d_v].copy_from_slice(&out);
            if record {
                layer_rows.push(row.probs);
            }
        }
        if let Some(r) = rows.as_mut() {
            r.push(layer_rows);
        }
        x.add_assign(&concat.matmul(&p.wo)?);

        let (h2, _) = rms_norm(&x, &p.mlp_norm, eps);
        let up = h2.matmul(&p.w_up)?;
        let act = Matrix::from_fn(1, up.cols(), |r, c| silu(up.get(r, c)));
        x.add_assign(&act.matmul(&p.w_down)?);
    }
    let (hf, _) = rms_norm(&x, &params.final_norm, eps);
    let logits = hf.matmul(&params.lm_head)?.into_vec();
    cache.len += 1;
    Ok(StepOutput { logits, rows })
}

/// Lowest index of the maximum.
pub fn argmax(v: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as u32
}

#[derive(Debug, Clone)]
pub struct Decoded {
    pub tokens: Vec<u32>,
    /// Prompt segments extended with one answer position per generated token.
    pub segments: SegmentMap,
    /// Logits that produced each generated token.
    pub logits: Vec<Vec<f64>>,
    /// One step per generated token: the attention rows of that token as a query.
    pub trace: Option<AttentionTrace>,
}

/// Greedy generation of up to `max_new_tokens` tokens after `prompt`.
///
/// `segments` describes the prompt only; every generated token joins the
/// answer segment.
pub fn greedy_decode(
    model: &ToyModel,
    prompt: &[u32],
    segments: &SegmentMap,
    max_new_tokens: usize,
    record_trace: bool,
) -> Result<Decoded> {
    let a = &model.spec.attention;
    if segments.len() != prompt.len() || !segments.indices(Segment::Answer).is_empty() {
        return Err(RaveError::Config(
            "prompt segment map must cover exactly the prompt and contain no answer positions"
                .into(),
        ));
    }
    let mut trace = record_trace.then(|| AttentionTrace::new(a.num_layers, a.n_q_heads));
    let mut segs = segments.clone();
    let mut out = Decoded {
        tokens: Vec::new(),
        segments: segs.clone(),
        logits: Vec::new(),
        trace: None,
    };
    if max_new_tokens == 0 {
        out.trace = trace;
        return Ok(out);
    }
    if prompt.is_empty() {
        return Err(RaveError::Config(
            "greedy decoding needs a non-empty prompt".into(),
        ));
    }
    let total = prompt.len() + max_new_tokens;
    if total > model.spec.max_seq_len {
        return Err(RaveError::SequenceTooLong {
            len: total,
            max: model.spec.max_seq_len,
        });
    }

    let mut cache = KvCache::new(model);
    let mut last = Vec::new();
    for &t in prompt {
        last = decode_step(model, &mut cache, t, &segs, false)?.logits;
    }
    for step in 0..max_new_tokens {
        let next = argmax(&last);
        out.tokens.push(next);
        out.logits.push(std::mem::take(&mut last));
        let pos = segs.push_answer();
        let need_logits = step + 1 < max_new_tokens;
        if need_logits || record_trace {
            let s = decode_step(model, &mut cache, next, &segs, record_trace)?;
            if let (Some(tr), Some(rows)) = (trace.as_mut(), s.rows) {
                tr.record(pos, rows)?;
            }
            last = s.logits;
        }
    }
    out.segments = segs;
    out.trace = trace;
    Ok(out)
}
