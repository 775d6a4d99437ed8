use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::error::{RaveError, Result};
use crate::gate::{select_heads, GateParams, HeadPartition};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    Standard,
    Rave,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelSpec {
    pub vocab_size: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub variant: AttentionVariant,
    pub attention: AttentionConfig,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    /// Standard deviation of the initial gate weights. Zero reproduces the
    /// standard model exactly, but is a stationary point of the bilinear
    /// gate: both gate gradients vanish there and training cannot leave it.
    #[serde(default)]
    pub gate_init_std: f64,
}

fn default_norm_eps() -> f64 {
    1e-6
}

impl ToyModelSpec {
    pub fn new(
        vocab_size: usize,
        d_model: usize,
        num_layers: usize,
        n_q_heads: usize,
        n_kv_heads: usize,
        variant: AttentionVariant,
    ) -> Self {
        ToyModelSpec {
            vocab_size,
            d_ff: 4 * d_model,
            max_seq_len: 64,
            variant,
            attention: AttentionConfig::new(d_model, num_layers, n_q_heads, n_kv_heads),
            norm_eps: default_norm_eps(),
            gate_init_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        let a = &self.attention;
        if a.d_model != a.n_q_heads * a.d_k {
            return Err(RaveError::Config(format!(
                "d_model {} != n_q_heads {} * d_k {}",
                a.d_model, a.n_q_heads, a.d_k
            )));
        }
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(RaveError::Config(format!("{name} must be positive")));
            }
        }
        if self.norm_eps.is_nan() || self.norm_eps <= 0.0 {
            return Err(RaveError::Config("norm_eps must be positive".into()));
        }
        if !(self.gate_init_std >= 0.0 && self.gate_init_std.is_finite()) {
            return Err(RaveError::Config(
                "gate_init_std must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Gated heads for this spec; empty for the standard variant.
    pub fn partition(&self) -> Result<HeadPartition> {
        match self.variant {
            AttentionVariant::Standard => Ok(HeadPartition::none(self.attention.n_q_heads)),
            AttentionVariant::Rave => select_heads(
                self.attention.n_q_heads,
                self.attention.n_kv_heads,
                self.attention.head_ratio,
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub mlp_norm: Vec<f64>,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

/// All learnable parameters of the toy model, gates included.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embed: Matrix,
    pub layers: Vec<LayerParams>,
    pub final_norm: Vec<f64>,
    pub lm_head: Matrix,
    pub gates: GateParams,
}

/// Borrowed view of one named tensor.
pub struct TensorView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorViewMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

fn fill_normal(m: &mut Matrix, std: f64, rng: &mut ChaCha8Rng) {
    let dist = Normal::new(0.0, std).expect("finite positive std");
    for x in m.as_mut_slice() {
        *x = dist.sample(rng);
    }
}

impl ModelParams {
    pub fn zeros(spec: &ToyModelSpec) -> Self {
        let a = &spec.attention;
        let d = a.d_model;
        let layer = || LayerParams {
            attn_norm: vec![0.0; d],
            wq: Matrix::zeros(d, a.n_q_heads * a.d_k),
            wk: Matrix::zeros(d, a.n_kv_heads * a.d_k),
            wv: Matrix::zeros(d, a.n_kv_heads * a.d_v),
            wo: Matrix::zeros(a.n_q_heads * a.d_v, d),
            mlp_norm: vec![0.0; d],
            w_up: Matrix::zeros(d, spec.d_ff),
            w_down: Matrix::zeros(spec.d_ff, d),
        };
        ModelParams {
            embed: Matrix::zeros(spec.vocab_size, d),
            layers: (0..a.num_layers).map(|_| layer()).collect(),
            final_norm: vec![0.0; d],
            lm_head: Matrix::zeros(d, spec.vocab_size),
            gates: GateParams::zeros(a.num_layers, a.d_k),
        }
    }

    /// Gaussian initialization from `seed`; norm gains start at one. Gate
    /// weights are drawn last, so the backbone does not depend on the variant
    /// or on `gate_init_std`.
    pub fn init(spec: &ToyModelSpec, seed: u64) -> Self {
        let mut p = ModelParams::zeros(spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = spec.attention.d_model as f64;
        let depth = (2.0 * spec.attention.num_layers as f64).sqrt();
        fill_normal(&mut p.embed, 1.0, &mut rng);
        for l in &mut p.layers {
            l.attn_norm.fill(1.0);
            l.mlp_norm.fill(1.0);
            fill_normal(&mut l.wq, 1.0 / d.sqrt(), &mut rng);
            fill_normal(&mut l.wk, 1.0 / d.sqrt(), &mut rng);
            fill_normal(&mut l.wv, 1.0 / d.sqrt(), &mut rng);
            let wo_std = 1.0 / (l.wo.rows() as f64).sqrt() / depth;
            fill_normal(&mut l.wo, wo_std, &mut rng);
            fill_normal(&mut l.w_up, 1.0 / d.sqrt(), &mut rng);
            let down_std = 1.0 / (spec.d_ff as f64).sqrt() / depth;
            fill_normal(&mut l.w_down, down_std, &mut rng);
        }
        p.final_norm.fill(1.0);
        fill_normal(&mut p.lm_head, 1.0 / d.sqrt(), &mut rng);
        if spec.gate_init_std > 0.0 {
            let dist = Normal::new(0.0, spec.gate_init_std).expect("validated std");
            for g in &mut p.gates.layers {
                for x in g.w_q.iter_mut().chain(g.w_k.iter_mut()) {
                    *x = dist.sample(&mut rng);
                }
            }
        }
        p
    }

    /// Overwrites every gate weight with `N(0, std)` draws.
    pub fn randomize_gates(&mut self, std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, std).expect("finite positive std");
        for g in &mut self.gates.layers {
            for x in g.w_q.iter_mut().chain(g.w_k.iter_mut()) {
                *x = dist.sample(&mut rng);
            }
        }
    }

    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        fn m(name: String, x: &Matrix) -> TensorView<'_> {
            TensorView {
                name,
                shape: vec![x.rows(), x.cols()],
                data: x.as_slice(),
            }
        }
        fn v(name: String, x: &[f64]) -> TensorView<'_> {
            TensorView {
                name,
                shape: vec![x.len()],
                data: x,
            }
        }
        let mut out = vec![m("embed".into(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push(v(format!("layers.{i}.attn_norm"), &l.attn_norm));
            out.push(m(format!("layers.{i}.wq"), &l.wq));
            out.push(m(format!("layers.{i}.wk"), &l.wk));
            out.push(m(format!("layers.{i}.wv"), &l.wv));
            out.push(m(format!("layers.{i}.wo"), &l.wo));
            out.push(v(format!("layers.{i}.mlp_norm"), &l.mlp_norm));
            out.push(m(format!("layers.{i}.w_up"), &l.w_up));
            out.push(m(format!("layers.{i}.w_down"), &l.w_down));
        }
        out.push(v("final_norm".into(), &self.final_norm));
        out.push(m("lm_head".into(), &self.lm_head));
        for (i, g) in self.gates.layers.iter().enumerate() {
            out.push(v(format!("gates.{i}.w_q"), &g.w_q));
            out.push(v(format!("gates.{i}.w_k"), &g.w_k));
        }
        out
    }

    /// Same order and names as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        fn m<'a>(name: String, x: &'a mut Matrix) -> TensorViewMut<'a> {
            let shape = vec![x.rows(), x.cols()];
            TensorViewMut {
                name,
                shape,
                data: x.as_mut_slice(),
            }
        }
        fn v<'a>(name: String, x: &'a mut Vec<f64>) -> TensorViewMut<'a> {
            TensorViewMut {
                name,
                shape: vec![x.len()],
                data: x.as_mut_slice(),
            }
        }
        let mut out = vec![m("embed".into(), &mut self.embed)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push(v(format!("layers.{i}.attn_norm"), &mut l.attn_norm));
            out.push(m(format!("layers.{i}.wq"), &mut l.wq));
            out.push(m(format!("layers.{i}.wk"), &mut l.wk));
            out.push(m(format!("layers.{i}.wv"), &mut l.wv));
            out.push(m(format!("layers.{i}.wo"), &mut l.wo));
            out.push(v(format!("layers.{i}.mlp_norm"), &mut l.mlp_norm));
            out.push(m(format!("layers.{i}.w_up"), &mut l.w_up));
            out.push(m(format!("layers.{i}.w_down"), &mut l.w_down));
        }
        out.push(v("final_norm".into(), &mut self.final_norm));
        out.push(m("lm_head".into(), &mut self.lm_head));
        for (i, g) in self.gates.layers.iter_mut().enumerate() {
            out.push(v(format!("gates.{i}.w_q"), &mut g.w_q));
            out.push(v(format!("gates.{i}.w_k"), &mut g.w_k));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += scale * s;
            }
        }
    }

    pub fn bit_eq(&self, other: &ModelParams) -> bool {
        let (a, b) = (self.tensors(), other.tensors());
        a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| {
                x.name == y.name
                    && x.shape == y.shape
                    && x.data
                        .iter()
                        .zip(y.data)
                        .all(|(p, q)| p.to_bits() == q.to_bits())
            })
    }
}

/// A spec together with its parameters and derived head partition.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub spec: ToyModelSpec,
    pub params: ModelParams,
    partition: HeadPartition,
}

impl ToyModel {
    pub fn new(spec: ToyModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let params = ModelParams::init(&spec, seed);
        ToyModel::with_params(spec, params)
    }

    pub fn with_params(spec: ToyModelSpec, params: ModelParams) -> Result<Self> {
        spec.validate()?;
        let expected = ModelParams::zeros(&spec);
        let shapes_match = expected
            .tensors()
            .iter()
            .zip(params.tensors())
            .all(|(e, p)| e.name == p.name && e.shape == p.shape)
            && expected.tensors().len() == params.tensors().len();
        if !shapes_match {
            return Err(RaveError::Dimension(
                "parameter shapes do not match the model spec".into(),
            ));
        }
        let partition = spec.partition()?;
        Ok(ToyModel {
            spec,
            params,
            partition,
        })
    }

    pub fn partition(&self) -> &HeadPartition {
        &self.partition
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_parameter_count_is_two_l_dk() {
        let spec = ToyModelSpec::new(64, 32, 3, 4, 2, AttentionVariant::Rave);
        let p = ModelParams::init(&spec, 1);
        assert_eq!(p.gates.num_params(), 2 * 3 * 8);
        assert!(p
            .gates
            .layers
            .iter()
            .all(|g| g.w_q.iter().chain(&g.w_k).all(|&x| x == 0.0)));
    }

    #[test]
    fn init_is_variant_independent() {
        let a = ModelParams::init(
            &ToyModelSpec::new(16, 8, 1, 2, 1, AttentionVariant::Standard),
            9,
        );
        let b = ModelParams::init(
            &ToyModelSpec::new(16, 8, 1, 2, 1, AttentionVariant::Rave),
            9,
        );
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn tensor_views_agree() {
        let spec = ToyModelSpec::new(16, 8, 2, 2, 1, AttentionVariant::Rave);
        let mut p = ModelParams::init(&spec, 3);
        let names: Vec<String> = p.tensors().into_iter().map(|t| t.name).collect();
        let names_mut: Vec<String> = p.tensors_mut().into_iter().map(|t| t.name).collect();
        assert_eq!(names, names_mut);
        assert_eq!(names.len(), 1 + 2 * 8 + 2 + 2 * 2);
    }

    #[test]
    fn spec_validation() {
        let mut spec = ToyModelSpec::new(16, 8, 1, 2, 1, AttentionVariant::Rave);
        assert!(spec.validate().is_ok());
        spec.attention.d_k = 2;
        assert!(spec.validate().is_err());
    }
}
