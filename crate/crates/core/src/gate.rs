//! Pair gate over visual keys.
//!
//! Each layer owns two vectors `w_q`, `w_k` (length `d_k`) shared by all of
//! its query heads. A gated head projects its pre-rotary queries and keys to
//! scalar scores, forms `G_ij = tanh(s_q,i * s_k,j)` and adds `gamma * G_ij`
//! to the logits of visual keys only. Text-key logits pass through untouched.

use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_logits, mix_values, rope_apply, rope_backward, softmax_visible, AttentionConfig,
    CausalMask, GateForm, GateLocation, GateNonlinearity, GateStage, GqaMap,
};
use crate::diagnostics::{Segment, SegmentMap};
use crate::error::{RaveError, Result};
use crate::matrix::{dot, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGate {
    pub w_q: Vec<f64>,
    pub w_k: Vec<f64>,
}

impl LayerGate {
    pub fn zeros(d_k: usize) -> Self {
        LayerGate {
            w_q: vec![0.0; d_k],
            w_k: vec![0.0; d_k],
        }
    }

    pub fn d_k(&self) -> usize {
        self.w_q.len()
    }
}

/// Gate projections for every layer. Initialized to exact zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub layers: Vec<LayerGate>,
}

impl GateParams {
    pub fn zeros(num_layers: usize, d_k: usize) -> Self {
        GateParams {
            layers: (0..num_layers).map(|_| LayerGate::zeros(d_k)).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|g| g.w_q.len() + g.w_k.len()).sum()
    }

    pub fn layer(&self, layer: usize) -> Result<&LayerGate> {
        self.layers
            .get(layer)
            .ok_or_else(|| RaveError::Config(format!("no gate parameters for layer {layer}")))
    }
}

/// Indicator of image positions among the keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisualKeyMask(Vec<bool>);

impl VisualKeyMask {
    pub fn from_segments(segments: &SegmentMap) -> Self {
        let mut mask = vec![false; segments.len()];
        for &p in segments.indices(Segment::Image) {
            mask[p] = true;
        }
        VisualKeyMask(mask)
    }

    pub fn from_bools(mask: Vec<bool>) -> Self {
        VisualKeyMask(mask)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn is_visual(&self, j: usize) -> bool {
        self.0[j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

/// The query heads that receive the gate: the `round(p * r)` lowest-index
/// heads of every GQA group, identical at every layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadPartition {
    gated: Vec<bool>,
    per_group: usize,
}

impl HeadPartition {
    pub fn none(n_q_heads: usize) -> Self {
        HeadPartition {
            gated: vec![false; n_q_heads],
            per_group: 0,
        }
    }

    #[inline]
    pub fn contains(&self, head: usize) -> bool {
        self.gated.get(head).copied().unwrap_or(false)
    }

    pub fn gated_heads(&self) -> Vec<usize> {
        (0..self.gated.len()).filter(|&h| self.gated[h]).collect()
    }

    pub fn len(&self) -> usize {
        self.gated.iter().filter(|&&g| g).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn per_group(&self) -> usize {
        self.per_group
    }
}

/// Picks `round(p * r)` heads per group (`f64::round`, halves away from zero).
pub fn select_heads(n_q_heads: usize, n_kv_heads: usize, head_ratio: f64) -> Result<HeadPartition> {
    let map = GqaMap::new(n_q_heads, n_kv_heads)?;
    if !(0.0..=1.0).contains(&head_ratio) {
        return Err(RaveError::Config(format!(
            "head ratio {head_ratio} must lie in [0, 1]"
        )));
    }
    let r = map.group_size();
    let per_group = (head_ratio * r as f64).round() as usize;
    let gated = (0..n_q_heads).map(|h| h % r < per_group).collect();
    Ok(HeadPartition { gated, per_group })
}

/// Per-token scalar scores `s_q = Q̄ w_q`, `s_k = K̄ w_k` from pre-rotary features.
pub fn gate_scores(
    q_bar: &Matrix,
    k_bar: &Matrix,
    gate: &LayerGate,
) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok((q_bar.matvec(&gate.w_q)?, k_bar.matvec(&gate.w_k)?))
}

/// Outer-product gate `G_ij = phi(s_q,i * s_k,j)`.
pub fn pair_gate(s_q: &[f64], s_k: &[f64], phi: GateNonlinearity) -> Result<Matrix> {
    if s_q.len() != s_k.len() {
        return Err(RaveError::Dimension(format!(
            "{} query scores vs {} key scores",
            s_q.len(),
            s_k.len()
        )));
    }
    Ok(Matrix::from_fn(s_q.len(), s_k.len(), |i, j| {
        phi.apply(s_q[i] * s_k[j])
    }))
}

#[inline]
fn combine(x: f64, g: f64, gamma: f64, form: GateForm) -> f64 {
    match form {
        GateForm::Additive => x + gamma * g,
        GateForm::Multiplicative => x * (1.0 + gamma * g),
    }
}

fn check_square(name: &str, m: &Matrix, n: usize) -> Result<()> {
    if m.shape() != (n, n) {
        return Err(RaveError::Dimension(format!(
            "{name} is {}x{}, expected {n}x{n}",
            m.rows(),
            m.cols()
        )));
    }
    Ok(())
}

/// Injects the gate into the logits of visual-key columns.
///
/// Non-visual entries are copied unchanged.
pub fn recalibrate_logits(
    logits: &Matrix,
    gate: &Matrix,
    gamma: f64,
    visual: &VisualKeyMask,
    form: GateForm,
) -> Result<Matrix> {
    let n = visual.len();
    check_square("logits", logits, n)?;
    check_square("gate", gate, n)?;
    Ok(Matrix::from_fn(n, n, |i, j| {
        let l = logits.get(i, j);
        if visual.is_visual(j) {
            combine(l, gate.get(i, j), gamma, form)
        } else {
            l
        }
    }))
}

/// Applies the gate after the softmax: visual entries are shifted (or
/// scaled), clamped at zero and each row is renormalized over its visible
/// keys.
pub fn post_softmax_recalibrate(
    attn: &Matrix,
    gate: &Matrix,
    gamma: f64,
    visual: &VisualKeyMask,
    form: GateForm,
    mask: &CausalMask,
) -> Result<Matrix> {
    let n = visual.len();
    check_square("attention", attn, n)?;
    check_square("gate", gate, n)?;
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        let len = mask.visible(i);
        let (probs, _) = renormalize_row(
            &attn.row(i)[..len],
            &gate.row(i)[..len],
            visual,
            gamma,
            form,
            i,
        )?;
        out.row_mut(i)[..len].copy_from_slice(&probs);
    }
    Ok(out)
}

/// Returns the normalized row and the clamped, unnormalized one.
fn renormalize_row(
    base: &[f64],
    gate: &[f64],
    visual: &VisualKeyMask,
    gamma: f64,
    form: GateForm,
    row: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let raw: Vec<f64> = base
        .iter()
        .enumerate()
        .map(|(j, &a)| {
            if visual.is_visual(j) {
                combine(a, gate[j], gamma, form).max(0.0)
            } else {
                a
            }
        })
        .collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(RaveError::DegenerateRow {
            row,
            reason: format!("post-softmax recalibration left total mass {total}"),
        });
    }
    Ok((raw.iter().map(|&x| x / total).collect(), raw))
}

/// The recalibration switches of [`AttentionConfig`] relevant to one row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recalibration {
    pub gamma: f64,
    pub location: GateLocation,
    pub form: GateForm,
    pub phi: GateNonlinearity,
}

impl From<&AttentionConfig> for Recalibration {
    fn from(cfg: &AttentionConfig) -> Self {
        Recalibration {
            gamma: cfg.gamma,
            location: cfg.location,
            form: cfg.form,
            phi: cfg.phi,
        }
    }
}

pub(crate) struct RowAttention {
    pub probs: Vec<f64>,
    /// Post-softmax only: the unmodified softmax row.
    pub base: Option<Vec<f64>>,
    /// Post-softmax only: clamped, unnormalized row.
    pub raw: Option<Vec<f64>>,
}

/// Attention distribution of one query row over its visible keys.
///
/// `logits` and `gate` cover exactly the visible prefix. With `gate = None`
/// this is plain softmax.
pub(crate) fn attend_row(
    logits: &[f64],
    gate: Option<&[f64]>,
    visual: &VisualKeyMask,
    recal: Recalibration,
    row: usize,
) -> Result<RowAttention> {
    let Some(g) = gate else {
        return Ok(RowAttention {
            probs: softmax_visible(logits, row)?,
            base: None,
            raw: None,
        });
    };
    match recal.location {
        GateLocation::PreSoftmax => {
            let tilde: Vec<f64> = logits
                .iter()
                .enumerate()
                .map(|(j, &l)| {
                    if visual.is_visual(j) {
                        combine(l, g[j], recal.gamma, recal.form)
                    } else {
                        l
                    }
                })
                .collect();
            Ok(RowAttention {
                probs: softmax_visible(&tilde, row)?,
                base: None,
                raw: None,
            })
        }
        GateLocation::PostSoftmax => {
            let base = softmax_visible(logits, row)?;
            let (probs, raw) = renormalize_row(&base, g, visual, recal.gamma, recal.form, row)?;
            Ok(RowAttention {
                probs,
                base: Some(base),
                raw: Some(raw),
            })
        }
    }
}

/// Forward state of a gated head, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GateCache {
    pub gate: LayerGate,
    pub recal: Recalibration,
    pub visual: VisualKeyMask,
    pub gated_rows: Vec<bool>,
    pub s_q: Vec<f64>,
    pub s_k: Vec<f64>,
    pub g: Matrix,
    /// Post-softmax only: the unmodified softmax.
    pub base_attn: Option<Matrix>,
    /// Post-softmax only: clamped, unnormalized rows.
    pub raw_attn: Option<Matrix>,
}

/// Everything one head computed in the forward pass.
#[derive(Debug, Clone)]
pub struct HeadForward {
    pub q_bar: Matrix,
    pub k_bar: Matrix,
    pub v: Matrix,
    pub positions: Vec<usize>,
    pub rope_base: f64,
    pub q: Matrix,
    pub k: Matrix,
    pub logits: Matrix,
    /// Final attention probabilities, exactly zero above the diagonal.
    pub attn: Matrix,
    pub output: Matrix,
    /// `None` for heads running standard attention.
    pub gate: Option<GateCache>,
}

/// Which rows of a gated head are recalibrated.
pub fn gated_rows(stage: GateStage, segments: &SegmentMap) -> Vec<bool> {
    match stage {
        GateStage::PrefillAndDecode => vec![true; segments.len()],
        GateStage::DecodeOnly => {
            let mut rows = vec![false; segments.len()];
            for &p in segments.indices(Segment::Answer) {
                rows[p] = true;
            }
            rows
        }
    }
}

pub(crate) struct HeadGating<'a> {
    pub gate: &'a LayerGate,
    pub visual: VisualKeyMask,
    pub rows: Vec<bool>,
    pub recal: Recalibration,
}

pub(crate) fn head_forward(
    q_bar: &Matrix,
    k_bar: &Matrix,
    v: &Matrix,
    positions: &[usize],
    rope_base: f64,
    gating: Option<HeadGating<'_>>,
) -> Result<HeadForward> {
    let n = q_bar.rows();
    if k_bar.rows() != n || v.rows() != n {
        return Err(RaveError::Dimension(format!(
            "{n} queries, {} keys, {} values",
            k_bar.rows(),
            v.rows()
        )));
    }
    let q = rope_apply(q_bar, positions, rope_base)?;
    let k = rope_apply(k_bar, positions, rope_base)?;
    let logits = attention_logits(&q, &k)?;
    let mask = CausalMask::new(n);

    let gate_state = match &gating {
        Some(gt) => {
            if gt.visual.len() != n || gt.rows.len() != n {
                return Err(RaveError::Dimension(format!(
                    "segment map covers {} positions, sequence has {n}",
                    gt.visual.len()
                )));
            }
            let (s_q, s_k) = gate_scores(q_bar, k_bar, gt.gate)?;
            let g = pair_gate(&s_q, &s_k, gt.recal.phi)?;
            Some((s_q, s_k, g))
        }
        None => None,
    };
    let post = matches!(&gating, Some(gt) if gt.recal.location == GateLocation::PostSoftmax);
    let mut base_attn = post.then(|| Matrix::zeros(n, n));
    let mut raw_attn = post.then(|| Matrix::zeros(n, n));

    let mut attn = Matrix::zeros(n, n);
    let mut output = Matrix::zeros(n, v.cols());
    for i in 0..n {
        let len = mask.visible(i);
        let row_gate = match (&gating, &gate_state) {
            (Some(gt), Some((_, _, g))) if gt.rows[i] => Some(&g.row(i)[..len]),
            _ => None,
        };
        let recal = gating.as_ref().map_or(
            Recalibration {
                gamma: 0.0,
                location: GateLocation::PreSoftmax,
                form: GateForm::Additive,
                phi: GateNonlinearity::Tanh,
            },
            |gt| gt.recal,
        );
        let visual = gating.as_ref().map(|gt| &gt.visual);
        let empty = VisualKeyMask(Vec::new());
        let row = attend_row(
            &logits.row(i)[..len],
            row_gate,
            visual.unwrap_or(&empty),
            recal,
            i,
        )?;
        attn.row_mut(i)[..len].copy_from_slice(&row.probs);
        if let (Some(b), Some(src)) = (base_attn.as_mut(), row.base.as_ref()) {
            b.row_mut(i)[..len].copy_from_slice(src);
        }
        if let (Some(r), Some(src)) = (raw_attn.as_mut(), row.raw.as_ref()) {
            r.row_mut(i)[..len].copy_from_slice(src);
        }
        output
            .row_mut(i)
            .copy_from_slice(&mix_values(&row.probs, v));
    }

    let gate = match (gating, gate_state) {
        (Some(gt), Some((s_q, s_k, g))) => Some(GateCache {
            gate: gt.gate.clone(),
            recal: gt.recal,
            visual: gt.visual,
            gated_rows: gt.rows,
            s_q,
            s_k,
            g,
            base_attn,
            raw_attn,
        }),
        _ => None,
    };
    Ok(HeadForward {
        q_bar: q_bar.clone(),
        k_bar: k_bar.clone(),
        v: v.clone(),
        positions: positions.to_vec(),
        rope_base,
        q,
        k,
        logits,
        attn,
        output,
        gate,
    })
}

/// Forward pass of one query head. Heads outside `partition` run standard
/// attention; gated heads follow the location/form/stage switches of `cfg`.
#[allow(clippy::too_many_arguments)]
pub fn rave_attention_forward(
    q_bar: &Matrix,
    k_bar: &Matrix,
    v: &Matrix,
    positions: &[usize],
    gate: &LayerGate,
    head: usize,
    partition: &HeadPartition,
    cfg: &AttentionConfig,
    segments: &SegmentMap,
) -> Result<HeadForward> {
    let gating = if partition.contains(head) {
        if gate.d_k() != q_bar.cols() {
            return Err(RaveError::Dimension(format!(
                "gate width {} vs head width {}",
                gate.d_k(),
                q_bar.cols()
            )));
        }
        Some(HeadGating {
            gate,
            visual: VisualKeyMask::from_segments(segments),
            rows: gated_rows(cfg.stage, segments),
            recal: Recalibration::from(cfg),
        })
    } else {
        None
    };
    head_forward(q_bar, k_bar, v, positions, cfg.rope_base, gating)
}

/// Adjoints produced by [`gate_gradients`].
#[derive(Debug, Clone)]
pub struct HeadGradients {
    pub d_q_bar: Matrix,
    pub d_k_bar: Matrix,
    pub d_v: Matrix,
    /// Zero when the head is ungated.
    pub d_gate_q: Vec<f64>,
    pub d_gate_k: Vec<f64>,
}

/// Reverse-mode derivatives of one head, given the adjoint of its output.
///
/// Differentiates through the value mix, softmax, gate injection (all
/// location/form variants), `tanh`, the score projections and RoPE.
pub fn gate_gradients(fwd: &HeadForward, d_out: &Matrix) -> Result<HeadGradients> {
    let n = fwd.attn.rows();
    if d_out.shape() != fwd.output.shape() {
        return Err(RaveError::Dimension(format!(
            "output adjoint is {}x{}, output is {}x{}",
            d_out.rows(),
            d_out.cols(),
            fwd.output.rows(),
            fwd.output.cols()
        )));
    }
    let d_k = fwd.q.cols();
    let scale = (d_k as f64).sqrt();
    let mut d_v = Matrix::zeros(n, fwd.v.cols());
    let mut d_logits = Matrix::zeros(n, n);
    let mut d_gate = fwd.gate.as_ref().map(|_| Matrix::zeros(n, n));

    for i in 0..n {
        let len = i + 1;
        let a = &fwd.attn.row(i)[..len];
        let dy = d_out.row(i);
        let d_a: Vec<f64> = (0..len).map(|j| dot(dy, fwd.v.row(j))).collect();
        for (j, &p) in a.iter().enumerate() {
            if p != 0.0 {
                for (dv, y) in d_v.row_mut(j).iter_mut().zip(dy) {
                    *dv += p * y;
                }
            }
        }
        let inner: f64 = a.iter().zip(&d_a).map(|(p, d)| p * d).sum();

        let gated = fwd.gate.as_ref().filter(|gc| gc.gated_rows[i]);
        let Some(gc) = gated else {
            let dl = d_logits.row_mut(i);
            for j in 0..len {
                dl[j] = a[j] * (d_a[j] - inner);
            }
            continue;
        };
        let (gamma, form) = (gc.recal.gamma, gc.recal.form);
        let g_row = gc.g.row(i);
        let dg = d_gate
            .as_mut()
            .expect("gate adjoint allocated for gated head")
            .row_mut(i);
        match gc.recal.location {
            GateLocation::PreSoftmax => {
                let l_row = fwd.logits.row(i);
                let dl = d_logits.row_mut(i);
                for j in 0..len {
                    let dz = a[j] * (d_a[j] - inner);
                    if gc.visual.is_visual(j) {
                        match form {
                            GateForm::Additive => {
                                dl[j] = dz;
                                dg[j] = gamma * dz;
                            }
                            GateForm::Multiplicative => {
                                dl[j] = dz * (1.0 + gamma * g_row[j]);
                                dg[j] = dz * gamma * l_row[j];
                            }
                        }
                    } else {
                        dl[j] = dz;
                    }
                }
            }
            GateLocation::PostSoftmax => {
                let (Some(base_m), Some(raw_m)) = (&gc.base_attn, &gc.raw_attn) else {
                    return Err(RaveError::Config("post-softmax cache is missing".into()));
                };
                let base = &base_m.row(i)[..len];
                let total: f64 = raw_m.row(i)[..len].iter().sum();
                let mut d_base = vec![0.0; len];
                for j in 0..len {
                    let d_raw = (d_a[j] - inner) / total;
                    if gc.visual.is_visual(j) {
                        if combine(base[j], g_row[j], gamma, form) > 0.0 {
                            match form {
                                GateForm::Additive => {
                                    d_base[j] = d_raw;
                                    dg[j] = gamma * d_raw;
                                }
                                GateForm::Multiplicative => {
                                    d_base[j] = d_raw * (1.0 + gamma * g_row[j]);
                                    dg[j] = d_raw * gamma * base[j];
                                }
                            }
                        }
                    } else {
                        d_base[j] = d_raw;
                    }
                }
                let t: f64 = base.iter().zip(&d_base).map(|(p, d)| p * d).sum();
                let dl = d_logits.row_mut(i);
                for j in 0..len {
                    dl[j] = base[j] * (d_base[j] - t);
                }
            }
        }
    }

    // L = Q K^T / sqrt(d_k)
    let mut d_q = d_logits.matmul(&fwd.k)?;
    let mut d_kr = d_logits.t_matmul(&fwd.q)?;
    for x in d_q.as_mut_slice().iter_mut().chain(d_kr.as_mut_slice()) {
        *x /= scale;
    }
    let mut d_q_bar = rope_backward(&d_q, &fwd.positions, fwd.rope_base)?;
    let mut d_k_bar = rope_backward(&d_kr, &fwd.positions, fwd.rope_base)?;

    let mut d_gate_q = vec![0.0; d_k];
    let mut d_gate_k = vec![0.0; d_k];
    if let (Some(gc), Some(dg)) = (&fwd.gate, &d_gate) {
        let mut d_sq = vec![0.0; n];
        let mut d_sk = vec![0.0; n];
        for i in 0..n {
            for j in 0..=i {
                let d_pre = dg.get(i, j) * gc.recal.phi.derivative_from_output(gc.g.get(i, j));
                d_sq[i] += d_pre * gc.s_k[j];
                d_sk[j] += d_pre * gc.s_q[i];
            }
        }
        for i in 0..n {
            let (qb, kb) = (fwd.q_bar.row(i), fwd.k_bar.row(i));
            for c in 0..d_k {
                d_gate_q[c] += qb[c] * d_sq[i];
                d_gate_k[c] += kb[c] * d_sk[i];
            }
            for (x, w) in d_q_bar.row_mut(i).iter_mut().zip(&gc.gate.w_q) {
                *x += d_sq[i] * w;
            }
            for (x, w) in d_k_bar.row_mut(i).iter_mut().zip(&gc.gate.w_k) {
                *x += d_sk[i] * w;
            }
        }
    }

    Ok(HeadGradients {
        d_q_bar,
        d_k_bar,
        d_v,
        d_gate_q,
        d_gate_k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn scores_examples() {
        let q = mat(&[&[1.0, 2.0], &[3.0, -1.0]]);
        let (s_q, s_k) = gate_scores(&q, &q, &LayerGate::zeros(2)).unwrap();
        assert_eq!(s_q, vec![0.0, 0.0]);
        assert_eq!(s_k, vec![0.0, 0.0]);
        let g = LayerGate {
            w_q: vec![0.5, 0.5],
            w_k: vec![0.0, 0.0],
        };
        let (s_q, _) = gate_scores(&q, &q, &g).unwrap();
        assert_eq!(s_q[0], 1.5);
        assert!(gate_scores(&Matrix::zeros(1, 3), &q, &g).is_err());
    }

    #[test]
    fn pair_gate_examples() {
        let z = pair_gate(&[0.0, 0.0], &[1.0, -3.0], GateNonlinearity::Tanh).unwrap();
        assert!(z.as_slice().iter().all(|&x| x == 0.0));
        let g = pair_gate(&[1.5], &[2.0], GateNonlinearity::Tanh).unwrap();
        assert!((g.get(0, 0) - 3f64.tanh()).abs() < 1e-15);
        assert!((g.get(0, 0) - 0.995055).abs() < 1e-6);
        let g = pair_gate(&[0.7, -0.2], &[-1.1, 0.4], GateNonlinearity::Tanh).unwrap();
        assert!(g.get(0, 0) < 0.0 && g.get(0, 1) > 0.0 && g.get(1, 0) > 0.0 && g.get(1, 1) < 0.0);
        assert!(pair_gate(&[1.0], &[1.0, 2.0], GateNonlinearity::Tanh).is_err());
    }

    #[test]
    fn recalibrate_examples() {
        let visual = VisualKeyMask::from_bools(vec![false, true]);
        let l = mat(&[&[0.3, 0.2], &[-1.0, 0.2]]);
        let same =
            recalibrate_logits(&l, &Matrix::zeros(2, 2), 1.0, &visual, GateForm::Additive).unwrap();
        assert!(same.bit_eq(&l));
        let g = mat(&[&[0.9, 0.5], &[-0.4, 0.5]]);
        let out = recalibrate_logits(&l, &g, 1.0, &visual, GateForm::Additive).unwrap();
        assert!((out.get(0, 1) - 0.7).abs() < 1e-15);
        assert_eq!(out.get(0, 0).to_bits(), 0.3f64.to_bits());
        assert_eq!(out.get(1, 0).to_bits(), (-1.0f64).to_bits());
        let mul = recalibrate_logits(&l, &g, 1.0, &visual, GateForm::Multiplicative).unwrap();
        assert!((mul.get(0, 1) - 0.3).abs() < 1e-15);
        assert!(
            recalibrate_logits(&Matrix::zeros(3, 3), &g, 1.0, &visual, GateForm::Additive).is_err()
        );
    }

    #[test]
    fn post_softmax_examples() {
        let mask = CausalMask::new(2);
        let visual = VisualKeyMask::from_bools(vec![false, true]);
        let a = mat(&[&[1.0, 0.0], &[0.5, 0.5]]);
        let same = post_softmax_recalibrate(
            &a,
            &Matrix::zeros(2, 2),
            1.0,
            &visual,
            GateForm::Additive,
            &mask,
        )
        .unwrap();
        assert_eq!(same, a);
        let g = mat(&[&[0.0, 0.0], &[0.0, 0.5]]);
        let out =
            post_softmax_recalibrate(&a, &g, 1.0, &visual, GateForm::Additive, &mask).unwrap();
        assert!((out.get(1, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((out.get(1, 1) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(out.get(0, 1), 0.0);

        let only_visual = VisualKeyMask::from_bools(vec![true]);
        let err = post_softmax_recalibrate(
            &mat(&[&[1.0]]),
            &mat(&[&[-1.0]]),
            1.0,
            &only_visual,
            GateForm::Additive,
            &CausalMask::new(1),
        );
        assert!(matches!(err, Err(RaveError::DegenerateRow { row: 0, .. })));
    }

    #[test]
    fn head_selection_examples() {
        let p = select_heads(32, 8, 0.25).unwrap();
        assert_eq!(p.per_group(), 1);
        assert_eq!(p.len(), 8);
        assert_eq!(p.gated_heads(), vec![0, 4, 8, 12, 16, 20, 24, 28]);
        assert!(select_heads(32, 8, 0.0).unwrap().is_empty());
        assert_eq!(select_heads(32, 8, 1.0).unwrap().len(), 32);
        let half = select_heads(8, 2, 0.5).unwrap();
        assert_eq!(half.gated_heads(), vec![0, 1, 4, 5]);
        assert!(select_heads(8, 2, -0.1).is_err());
        assert!(select_heads(8, 3, 0.5).is_err());
    }

    #[test]
    fn zero_adjoint_gives_zero_gradients() {
        let segs = SegmentMap::contiguous(1, 2, 1, 0);
        let mut cfg = AttentionConfig::new(2, 1, 1, 1);
        cfg.d_k = 2;
        let q = mat(&[&[0.1, 0.2], &[0.3, -0.1], &[0.5, 0.4], &[-0.2, 0.6]]);
        let gate = LayerGate {
            w_q: vec![0.4, -0.3],
            w_k: vec![0.2, 0.7],
        };
        let part = select_heads(1, 1, 1.0).unwrap();
        let fwd = rave_attention_forward(&q, &q, &q, &[0, 1, 2, 3], &gate, 0, &part, &cfg, &segs)
            .unwrap();
        let g = gate_gradients(&fwd, &Matrix::zeros(4, 2)).unwrap();
        assert!(g.d_gate_q.iter().chain(&g.d_gate_k).all(|&x| x == 0.0));
        assert!(g.d_q_bar.as_slice().iter().all(|&x| x == 0.0));
        assert!(gate_gradients(&fwd, &Matrix::zeros(3, 2)).is_err());
    }
}
