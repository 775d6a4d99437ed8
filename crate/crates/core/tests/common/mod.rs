#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rave::attention::{GateForm, GateLocation, GateStage};
use rave::diagnostics::SegmentMap;
use rave::model::{
    backward_sequence, cross_entropy, forward_sequence, AttentionVariant, ModelParams, ToyModel,
    ToyModelSpec,
};

/// 1 layer, d_model 8, two query heads sharing one key/value head.
pub fn micro_spec(
    location: GateLocation,
    form: GateForm,
    stage: GateStage,
    head_ratio: f64,
) -> ToyModelSpec {
    let mut spec = ToyModelSpec::new(12, 8, 1, 2, 1, AttentionVariant::Rave);
    spec.d_ff = 12;
    spec.attention.location = location;
    spec.attention.form = form;
    spec.attention.stage = stage;
    spec.attention.head_ratio = head_ratio;
    spec
}

/// `[sys][img img][que][ans ans]`, loss on the two answer tokens.
pub fn micro_sequence(seed: u64, vocab: usize) -> (Vec<u32>, SegmentMap, Vec<Option<u32>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<u32> = (0..6).map(|_| rng.random_range(0..vocab as u32)).collect();
    let segments = SegmentMap::contiguous(1, 2, 1, 2);
    let targets = (0..6)
        .map(|i| (i == 3 || i == 4).then(|| tokens[i + 1]))
        .collect();
    (tokens, segments, targets)
}

pub fn mean_loss(
    model: &ToyModel,
    tokens: &[u32],
    segments: &SegmentMap,
    targets: &[Option<u32>],
) -> f64 {
    let fwd = forward_sequence(model, tokens, segments).unwrap();
    let (loss, count, _) = cross_entropy(&fwd.logits, targets).unwrap();
    loss / count as f64
}

/// Central differences of the mean loss w.r.t. every parameter entry, in
/// `ModelParams::tensors` order.
pub fn numeric_gradient(
    model: &ToyModel,
    tokens: &[u32],
    segments: &SegmentMap,
    targets: &[Option<u32>],
    step: f64,
) -> ModelParams {
    let mut out = ModelParams::zeros(&model.spec);
    let mut probe = model.clone();
    let n_tensors = model.params.tensors().len();
    for t in 0..n_tensors {
        let len = model.params.tensors()[t].data.len();
        for i in 0..len {
            let orig = model.params.tensors()[t].data[i];
            probe.params.tensors_mut()[t].data[i] = orig + step;
            let up = mean_loss(&probe, tokens, segments, targets);
            probe.params.tensors_mut()[t].data[i] = orig - step;
            let down = mean_loss(&probe, tokens, segments, targets);
            probe.params.tensors_mut()[t].data[i] = orig;
            out.tensors_mut()[t].data[i] = (up - down) / (2.0 * step);
        }
    }
    out
}

/// `|a - n| / max(|a|, |n|)`, or 0 when both are below `floor`.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < floor {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

pub fn random_micro_model(spec: ToyModelSpec, seed: u64, gate_std: f64) -> ToyModel {
    let mut model = ToyModel::new(spec, seed).unwrap();
    model.params.randomize_gates(gate_std, seed ^ 0xA5A5);
    // Move norm gains off 1 so their gradients are exercised at a generic point.
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 17);
    for t in model.params.tensors_mut() {
        if t.name.ends_with("norm") {
            for x in t.data.iter_mut() {
                *x = 1.0 + rng.random_range(-0.3..0.3);
            }
        }
    }
    model
}

/// Gate switches for [`dense_attention`].
pub struct OracleGate<'a> {
    pub w_q: &'a [f64],
    pub w_k: &'a [f64],
    pub visual: &'a [bool],
    /// Query rows that are recalibrated.
    pub rows: &'a [bool],
    pub gamma: f64,
    pub location: GateLocation,
    pub form: GateForm,
}

fn rope_dense(x: &[f64], pos: usize, base: f64) -> Vec<f64> {
    let d = x.len();
    let mut out = vec![0.0; d];
    for m in 0..d / 2 {
        let theta = pos as f64 * base.powf(-(2.0 * m as f64) / d as f64);
        let (c, s) = (theta.cos(), theta.sin());
        out[2 * m] = c * x[2 * m] - s * x[2 * m + 1];
        out[2 * m + 1] = s * x[2 * m] + c * x[2 * m + 1];
    }
    out
}

/// Causal RoPE attention (optionally gated), evaluated densely and step by
/// step. Returns `(O, A)` as nested vectors.
pub fn dense_attention(
    q_bar: &[Vec<f64>],
    k_bar: &[Vec<f64>],
    v: &[Vec<f64>],
    positions: &[usize],
    gate: Option<&OracleGate<'_>>,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = q_bar.len();
    let d = q_bar[0].len() as f64;
    let q: Vec<Vec<f64>> = (0..n)
        .map(|i| rope_dense(&q_bar[i], positions[i], 10_000.0))
        .collect();
    let k: Vec<Vec<f64>> = (0..n)
        .map(|i| rope_dense(&k_bar[i], positions[i], 10_000.0))
        .collect();
    let proj = |x: &[f64], w: &[f64]| x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
    let mut attn = vec![vec![0.0; n]; n];
    for i in 0..n {
        let mut logits = vec![f64::NEG_INFINITY; n];
        for j in 0..=i {
            logits[j] = q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / d.sqrt();
        }
        let g: Vec<f64> = match gate {
            Some(gt) => (0..n)
                .map(|j| (proj(&q_bar[i], gt.w_q) * proj(&k_bar[j], gt.w_k)).tanh())
                .collect(),
            None => vec![0.0; n],
        };
        let active = gate.filter(|gt| gt.rows[i]);
        let modify = |x: f64, j: usize, gt: &OracleGate<'_>| match gt.form {
            GateForm::Additive => x + gt.gamma * g[j],
            GateForm::Multiplicative => x * (1.0 + gt.gamma * g[j]),
        };
        if let Some(gt) = active.filter(|gt| gt.location == GateLocation::PreSoftmax) {
            for j in 0..=i {
                if gt.visual[j] {
                    logits[j] = modify(logits[j], j, gt);
                }
            }
        }
        let max = logits[..=i]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut row: Vec<f64> = exps.iter().map(|e| e / z).collect();
        if let Some(gt) = active.filter(|gt| gt.location == GateLocation::PostSoftmax) {
            for j in 0..=i {
                if gt.visual[j] {
                    row[j] = modify(row[j], j, gt).max(0.0);
                }
            }
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= z);
        }
        attn[i] = row;
    }
    let out = (0..n)
        .map(|i| {
            (0..v[0].len())
                .map(|c| (0..n).map(|j| attn[i][j] * v[j][c]).sum())
                .collect()
        })
        .collect();
    (out, attn)
}

pub fn to_nested(m: &rave::Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> rave::Matrix {
    rave::Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

/// Largest relative error between analytic and central-difference (step
/// 1e-5) gradients of the mean answer loss over all parameters, with the
/// name of the tensor where it occurs.
pub fn worst_gradient_error(spec: ToyModelSpec, seed: u64) -> (f64, String) {
    let model = random_micro_model(spec, seed, 0.8);
    let (tokens, segments, targets) = micro_sequence(seed, model.spec.vocab_size);
    let fwd = forward_sequence(&model, &tokens, &segments).unwrap();
    let (_, count, d_logits) = cross_entropy(&fwd.logits, &targets).unwrap();
    let mut analytic = backward_sequence(&model, &fwd, &d_logits).unwrap();
    for t in analytic.tensors_mut() {
        for x in t.data.iter_mut() {
            *x /= count as f64;
        }
    }
    let numeric = numeric_gradient(&model, &tokens, &segments, &targets, 1e-5);
    let mut worst = (0.0, String::new());
    for (a, n) in analytic.tensors().iter().zip(numeric.tensors()) {
        for (x, y) in a.data.iter().zip(n.data) {
            let e = relative_error(*x, *y, 1e-7);
            if e > worst.0 {
                worst = (e, a.name.clone());
            }
        }
    }
    worst
}
