//! Causal softmax attention with rotary position embedding and grouped-query
//! head sharing.
//!
//! Masked positions are excluded from the softmax reduction rather than being
//! represented by an infinite logit, so no `-inf * 0` path can produce NaN.
//! Every reduction sums over the key index in ascending order.

use serde::{Deserialize, Serialize};

use crate::error::{RaveError, Result};
use crate::matrix::{dot, Matrix};

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

/// Where the gate enters the attention computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateLocation {
    PreSoftmax,
    PostSoftmax,
}

/// How the gate combines with the score it modifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateForm {
    Additive,
    Multiplicative,
}

/// Which query rows receive the recalibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateStage {
    PrefillAndDecode,
    DecodeOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateNonlinearity {
    Tanh,
}

impl GateNonlinearity {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            GateNonlinearity::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the output value `y = phi(x)`.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            GateNonlinearity::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    /// Per-head query/key width.
    pub d_k: usize,
    /// Per-head value width.
    pub d_v: usize,
    pub num_layers: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub rope_base: f64,
    pub gamma: f64,
    /// Fraction `p` of each GQA group's query heads that are gated.
    pub head_ratio: f64,
    pub phi: GateNonlinearity,
    pub location: GateLocation,
    pub form: GateForm,
    pub stage: GateStage,
}

impl AttentionConfig {
    /// Main configuration: additive pre-softmax gating on a quarter of each
    /// group, applied during prefill and decoding.
    pub fn new(d_model: usize, num_layers: usize, n_q_heads: usize, n_kv_heads: usize) -> Self {
        let d_k = d_model.checked_div(n_q_heads).unwrap_or(0);
        AttentionConfig {
            d_model,
            d_k,
            d_v: d_k,
            num_layers,
            n_q_heads,
            n_kv_heads,
            rope_base: DEFAULT_ROPE_BASE,
            gamma: 1.0,
            head_ratio: 0.25,
            phi: GateNonlinearity::Tanh,
            location: GateLocation::PreSoftmax,
            form: GateForm::Additive,
            stage: GateStage::PrefillAndDecode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("num_layers", self.num_layers),
            ("n_q_heads", self.n_q_heads),
            ("n_kv_heads", self.n_kv_heads),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(RaveError::Config(format!("{name} must be positive")));
            }
        }
        if !self.n_q_heads.is_multiple_of(self.n_kv_heads) {
            return Err(RaveError::Config(format!(
                "n_q_heads {} is not a multiple of n_kv_heads {}",
                self.n_q_heads, self.n_kv_heads
            )));
        }
        if !self.d_k.is_multiple_of(2) {
            return Err(RaveError::Config(format!(
                "d_k {} must be even for RoPE",
                self.d_k
            )));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return Err(RaveError::Config(format!(
                "rope_base {} must be positive",
                self.rope_base
            )));
        }
        if !self.gamma.is_finite() {
            return Err(RaveError::Config("gamma must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.head_ratio) {
            return Err(RaveError::Config(format!(
                "head_ratio {} must lie in [0, 1]",
                self.head_ratio
            )));
        }
        Ok(())
    }

    /// Query heads per GQA group.
    pub fn group_size(&self) -> usize {
        self.n_q_heads / self.n_kv_heads
    }
}

/// Causal mask over `size` positions: key `j` is visible to query `i` iff `j <= i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CausalMask {
    size: usize,
}

impl CausalMask {
    pub fn new(size: usize) -> Self {
        CausalMask { size }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn allows(&self, query: usize, key: usize) -> bool {
        key <= query
    }

    /// Number of visible keys for `query`.
    #[inline]
    pub fn visible(&self, query: usize) -> usize {
        (query + 1).min(self.size)
    }
}

/// Inverse frequencies `base^(-2m/d_k)` for pair index `m`.
pub fn rope_inv_freq(d_k: usize, base: f64) -> Vec<f64> {
    (0..d_k / 2)
        .map(|m| base.powf(-((2 * m) as f64) / d_k as f64))
        .collect()
}

/// Rotates dimension pairs `(2m, 2m+1)` of `row` in place by `sign * position * inv_freq[m]`.
pub(crate) fn rotate_row(row: &mut [f64], position: usize, inv_freq: &[f64], sign: f64) {
    if position == 0 {
        return;
    }
    for (m, f) in inv_freq.iter().enumerate() {
        let theta = sign * position as f64 * f;
        let (sin, cos) = theta.sin_cos();
        let (a, b) = (row[2 * m], row[2 * m + 1]);
        row[2 * m] = a * cos - b * sin;
        row[2 * m + 1] = a * sin + b * cos;
    }
}

fn rope_check(x: &Matrix, positions: &[usize]) -> Result<()> {
    if !x.cols().is_multiple_of(2) {
        return Err(RaveError::Config(format!(
            "RoPE needs an even head dim, got {}",
            x.cols()
        )));
    }
    if positions.len() != x.rows() {
        return Err(RaveError::Dimension(format!(
            "{} positions for {} rows",
            positions.len(),
            x.rows()
        )));
    }
    Ok(())
}

/// Rotary position embedding of each row by its position.
pub fn rope_apply(x: &Matrix, positions: &[usize], base: f64) -> Result<Matrix> {
    rope_check(x, positions)?;
    let inv_freq = rope_inv_freq(x.cols(), base);
    let mut out = x.clone();
    for (i, &p) in positions.iter().enumerate() {
        rotate_row(out.row_mut(i), p, &inv_freq, 1.0);
    }
    Ok(out)
}

/// Transpose of [`rope_apply`]: maps an adjoint w.r.t. rotated features back
/// to the pre-rotation features.
pub fn rope_backward(grad: &Matrix, positions: &[usize], base: f64) -> Result<Matrix> {
    rope_check(grad, positions)?;
    let inv_freq = rope_inv_freq(grad.cols(), base);
    let mut out = grad.clone();
    for (i, &p) in positions.iter().enumerate() {
        rotate_row(out.row_mut(i), p, &inv_freq, -1.0);
    }
    Ok(out)
}

#[inline]
pub(crate) fn scaled_dot(q: &[f64], k: &[f64], scale: f64) -> f64 {
    dot(q, k) / scale
}

/// `L_ij = <Q_i, K_j> / sqrt(d_k)` for all pairs, masked or not.
pub fn attention_logits(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    if q.cols() != k.cols() {
        return Err(RaveError::Dimension(format!(
            "query width {} vs key width {}",
            q.cols(),
            k.cols()
        )));
    }
    let scale = (q.cols() as f64).sqrt();
    Ok(Matrix::from_fn(q.rows(), k.rows(), |i, j| {
        scaled_dot(q.row(i), k.row(j), scale)
    }))
}

/// Stable softmax over `logits` (all entries are visible).
pub(crate) fn softmax_visible(logits: &[f64], row: usize) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(RaveError::DegenerateRow {
            row,
            reason: "no visible keys".into(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(RaveError::DegenerateRow {
            row,
            reason: format!("non-finite logit max {max}"),
        });
    }
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    Ok(out)
}

/// Row-wise softmax of `L + M`; masked entries are exactly zero.
pub fn masked_softmax_rows(logits: &Matrix, mask: &CausalMask) -> Result<Matrix> {
    if logits.rows() != mask.size() || logits.cols() != mask.size() {
        return Err(RaveError::Dimension(format!(
            "{}x{} logits under a causal mask of size {}",
            logits.rows(),
            logits.cols(),
            mask.size()
        )));
    }
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        let n = mask.visible(i);
        let probs = softmax_visible(&logits.row(i)[..n], i)?;
        out.row_mut(i)[..n].copy_from_slice(&probs);
    }
    Ok(out)
}

/// `sum_j probs[j] * V_j` over the visible prefix.
pub(crate) fn mix_values(probs: &[f64], v: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; v.cols()];
    for (j, &p) in probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (o, x) in out.iter_mut().zip(v.row(j)) {
            *o += p * x;
        }
    }
    out
}

/// Index map from query heads to their shared key/value head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GqaMap {
    n_q_heads: usize,
    n_kv_heads: usize,
}

impl GqaMap {
    pub fn new(n_q_heads: usize, n_kv_heads: usize) -> Result<Self> {
        if n_q_heads == 0 || n_kv_heads == 0 || !n_q_heads.is_multiple_of(n_kv_heads) {
            return Err(RaveError::Config(format!(
                "{n_q_heads} query heads cannot be grouped over {n_kv_heads} key/value heads"
            )));
        }
        Ok(GqaMap {
            n_q_heads,
            n_kv_heads,
        })
    }

    pub fn group_size(&self) -> usize {
        self.n_q_heads / self.n_kv_heads
    }

    #[inline]
    pub fn kv_head(&self, q_head: usize) -> usize {
        q_head / self.group_size()
    }

    pub fn n_q_heads(&self) -> usize {
        self.n_q_heads
    }

    pub fn n_kv_heads(&self) -> usize {
        self.n_kv_heads
    }
}

/// Per-query-head borrowed views of the shared key/value heads.
pub fn gqa_expand<'a>(
    k_kv: &'a [Matrix],
    v_kv: &'a [Matrix],
    n_q_heads: usize,
    n_kv_heads: usize,
) -> Result<Vec<(&'a Matrix, &'a Matrix)>> {
    let map = GqaMap::new(n_q_heads, n_kv_heads)?;
    if k_kv.len() != n_kv_heads || v_kv.len() != n_kv_heads {
        return Err(RaveError::Dimension(format!(
            "expected {n_kv_heads} key/value heads, got {} keys and {} values",
            k_kv.len(),
            v_kv.len()
        )));
    }
    Ok((0..n_q_heads)
        .map(|h| {
            let g = map.kv_head(h);
            (&k_kv[g], &v_kv[g])
        })
        .collect())
}

/// Plain causal RoPE attention for one head. Returns `(O, A)`.
pub fn standard_attention_forward(
    q_bar: &Matrix,
    k_bar: &Matrix,
    v: &Matrix,
    positions: &[usize],
    mask: &CausalMask,
    rope_base: f64,
) -> Result<(Matrix, Matrix)> {
    if k_bar.rows() != q_bar.rows() || v.rows() != q_bar.rows() {
        return Err(RaveError::Dimension(format!(
            "{} queries, {} keys, {} values",
            q_bar.rows(),
            k_bar.rows(),
            v.rows()
        )));
    }
    let q = rope_apply(q_bar, positions, rope_base)?;
    let k = rope_apply(k_bar, positions, rope_base)?;
    let logits = attention_logits(&q, &k)?;
    let attn = masked_softmax_rows(&logits, mask)?;
    let mut out = Matrix::zeros(q_bar.rows(), v.cols());
    for i in 0..q_bar.rows() {
        let o = mix_values(&attn.row(i)[..mask.visible(i)], v);
        out.row_mut(i).copy_from_slice(&o);
    }
    Ok((out, attn))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let x = mat(&[&[0.3, -1.2, 4.0, -0.0]]);
        let y = rope_apply(&x, &[0], DEFAULT_ROPE_BASE).unwrap();
        assert!(x.bit_eq(&y));
    }

    #[test]
    fn rope_two_dim_rotation_by_one_radian() {
        // For d_k = 2 the only pair has inv_freq = base^0 = 1, so position 1 rotates by 1 rad.
        let x = mat(&[&[1.0, 0.0]]);
        let y = rope_apply(&x, &[1], 123.0).unwrap();
        assert!((y.get(0, 0) - 1f64.cos()).abs() < 1e-15);
        assert!((y.get(0, 1) - 1f64.sin()).abs() < 1e-15);
        assert!((y.get(0, 0) - 0.540302).abs() < 1e-6);
        assert!((y.get(0, 1) - 0.841471).abs() < 1e-6);
    }

    #[test]
    fn rope_errors() {
        let odd = Matrix::zeros(1, 3);
        assert!(matches!(
            rope_apply(&odd, &[0], 1e4),
            Err(RaveError::Config(_))
        ));
        let even = Matrix::zeros(2, 4);
        assert!(matches!(
            rope_apply(&even, &[0], 1e4),
            Err(RaveError::Dimension(_))
        ));
    }

    #[test]
    fn rope_backward_inverts_forward() {
        let x = Matrix::from_fn(3, 4, |r, c| (r as f64 + 1.0) * (c as f64 - 1.5));
        let pos = [0, 5, 17];
        let y = rope_apply(&x, &pos, 1e4).unwrap();
        let back = rope_backward(&y, &pos, 1e4).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn logits_examples() {
        let z = attention_logits(&Matrix::zeros(2, 4), &Matrix::zeros(2, 4)).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
        let l = attention_logits(&mat(&[&[2.0]]), &mat(&[&[3.0]])).unwrap();
        assert_eq!(l.get(0, 0), 6.0);
        let ones = mat(&[&[1.0, 1.0, 1.0, 1.0]]);
        assert_eq!(attention_logits(&ones, &ones).unwrap().get(0, 0), 2.0);
        assert!(attention_logits(&Matrix::zeros(1, 2), &Matrix::zeros(1, 4)).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mask = CausalMask::new(2);
        let a = masked_softmax_rows(&mat(&[&[7.0, 99.0], &[0.0, 0.0]]), &mask).unwrap();
        assert_eq!(a.row(0), &[1.0, 0.0]);
        assert_eq!(a.row(1), &[0.5, 0.5]);
        let b = masked_softmax_rows(&mat(&[&[0.0, 0.0], &[0.0, 3f64.ln()]]), &mask).unwrap();
        assert!((b.get(1, 0) - 0.25).abs() < 1e-15);
        assert!((b.get(1, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_shape_and_degenerate_errors() {
        assert!(masked_softmax_rows(&Matrix::zeros(2, 3), &CausalMask::new(2)).is_err());
        let bad = mat(&[&[f64::NAN]]);
        assert!(matches!(
            masked_softmax_rows(&bad, &CausalMask::new(1)),
            Err(RaveError::DegenerateRow { .. })
        ));
    }

    #[test]
    fn gqa_index_examples() {
        let id = GqaMap::new(4, 4).unwrap();
        assert!((0..4).all(|h| id.kv_head(h) == h));
        let g = GqaMap::new(8, 2).unwrap();
        let mapped: Vec<_> = (0..8).map(|h| g.kv_head(h)).collect();
        assert_eq!(mapped, [0, 0, 0, 0, 1, 1, 1, 1]);
        let g = GqaMap::new(32, 8).unwrap();
        assert_eq!(g.group_size(), 4);
        assert_eq!(g.kv_head(13), 3);
        assert!(GqaMap::new(6, 4).is_err());
    }

    #[test]
    fn gqa_expand_shares_storage() {
        let ks = vec![Matrix::zeros(1, 2), Matrix::from_fn(1, 2, |_, _| 1.0)];
        let vs = ks.clone();
        let views = gqa_expand(&ks, &vs, 4, 2).unwrap();
        assert!(std::ptr::eq(views[1].0, &ks[0]));
        assert!(std::ptr::eq(views[2].0, &ks[1]));
        assert!(gqa_expand(&ks, &vs, 3, 2).is_err());
    }

    #[test]
    fn standard_forward_trivial_cases() {
        let v = mat(&[&[3.0, -1.0]]);
        let (o, a) = standard_attention_forward(
            &mat(&[&[0.2, 0.1]]),
            &mat(&[&[-0.4, 0.3]]),
            &v,
            &[0],
            &CausalMask::new(1),
            1e4,
        )
        .unwrap();
        assert_eq!(a.get(0, 0), 1.0);
        assert_eq!(o, v);

        let zeros = Matrix::zeros(2, 2);
        let v = mat(&[&[1.0, 2.0], &[3.0, 6.0]]);
        let (o, a) =
            standard_attention_forward(&zeros, &zeros, &v, &[0, 1], &CausalMask::new(2), 1e4)
                .unwrap();
        assert_eq!(a.row(1), &[0.5, 0.5]);
        assert_eq!(o.row(1), &[2.0, 4.0]);
    }

    #[test]
    fn config_validation() {
        let mut c = AttentionConfig::new(32, 2, 4, 2);
        assert!(c.validate().is_ok());
        assert_eq!(c.d_k, 8);
        c.n_kv_heads = 3;
        assert!(c.validate().is_err());
        let mut c = AttentionConfig::new(32, 2, 4, 2);
        c.d_k = 7;
        assert!(c.validate().is_err());
        let mut c = AttentionConfig::new(32, 2, 4, 2);
        c.head_ratio = 1.5;
        assert!(c.validate().is_err());
    }
}
