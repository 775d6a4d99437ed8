//! Analytic gradients against central finite differences.

mod common;

use common::*;
use rave::attention::{GateForm, GateLocation, GateStage};

#[test]
fn additive_pre_softmax_all_parameters() {
    for seed in 0..5 {
        let spec = micro_spec(
            GateLocation::PreSoftmax,
            GateForm::Additive,
            GateStage::PrefillAndDecode,
            0.5,
        );
        let (e, name) = worst_gradient_error(spec, seed);
        assert!(e < 1e-4, "seed {seed}: relative error {e:e} in {name}");
    }
}

#[test]
fn every_variant_all_parameters() {
    for location in [GateLocation::PreSoftmax, GateLocation::PostSoftmax] {
        for form in [GateForm::Additive, GateForm::Multiplicative] {
            for stage in [GateStage::PrefillAndDecode, GateStage::DecodeOnly] {
                let spec = micro_spec(location, form, stage, 1.0);
                let (e, name) = worst_gradient_error(spec, 7);
                assert!(
                    e < 1e-4,
                    "{location:?}/{form:?}/{stage:?}: relative error {e:e} in {name}"
                );
            }
        }
    }
}

mod head_level {
    use super::common::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rave::attention::{AttentionConfig, GateForm, GateLocation};
    use rave::diagnostics::SegmentMap;
    use rave::gate::{gate_gradients, rave_attention_forward, select_heads, LayerGate};
    use rave::Matrix;

    struct Instance {
        q_bars: Vec<Matrix>,
        k_bar: Matrix,
        v: Matrix,
        weights: Vec<Matrix>,
        segments: SegmentMap,
        cfg: AttentionConfig,
    }

    /// N = 4, d_k = 2, two query heads sharing one key/value head.
    fn instance(
        seed: u64,
        segments: SegmentMap,
        location: GateLocation,
        form: GateForm,
    ) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = AttentionConfig::new(4, 1, 2, 1);
        cfg.location = location;
        cfg.form = form;
        Instance {
            q_bars: (0..2).map(|_| random_matrix(&mut rng, 4, 2, 1.0)).collect(),
            k_bar: random_matrix(&mut rng, 4, 2, 1.0),
            v: random_matrix(&mut rng, 4, 2, 1.0),
            weights: (0..2).map(|_| random_matrix(&mut rng, 4, 2, 1.0)).collect(),
            segments,
            cfg,
        }
    }

    /// `sum_h <C_h, O_h>` and its gate gradients summed over heads.
    fn loss_and_grad(inst: &Instance, gate: &LayerGate) -> (f64, Vec<f64>, Vec<f64>) {
        let partition = select_heads(2, 1, 1.0).unwrap();
        let positions = [0, 1, 2, 3];
        let (mut loss, mut gq, mut gk) = (0.0, vec![0.0; 2], vec![0.0; 2]);
        for h in 0..2 {
            let fwd = rave_attention_forward(
                &inst.q_bars[h],
                &inst.k_bar,
                &inst.v,
                &positions,
                gate,
                h,
                &partition,
                &inst.cfg,
                &inst.segments,
            )
            .unwrap();
            let c = &inst.weights[h];
            loss += fwd
                .output
                .as_slice()
                .iter()
                .zip(c.as_slice())
                .map(|(a, b)| a * b)
                .sum::<f64>();
            let g = gate_gradients(&fwd, c).unwrap();
            for d in 0..2 {
                gq[d] += g.d_gate_q[d];
                gk[d] += g.d_gate_k[d];
            }
        }
        (loss, gq, gk)
    }

    fn check(seed: u64, location: GateLocation, form: GateForm) {
        let inst = instance(seed, SegmentMap::contiguous(1, 2, 1, 0), location, form);
        let gate = LayerGate {
            w_q: vec![0.4, -0.3],
            w_k: vec![0.2, 0.5],
        };
        let (_, gq, gk) = loss_and_grad(&inst, &gate);
        let h = 1e-5;
        for which in 0..2 {
            for d in 0..2 {
                let mut up = gate.clone();
                let mut down = gate.clone();
                let (u, dn) = if which == 0 {
                    (&mut up.w_q, &mut down.w_q)
                } else {
                    (&mut up.w_k, &mut down.w_k)
                };
                u[d] += h;
                dn[d] -= h;
                let numeric =
                    (loss_and_grad(&inst, &up).0 - loss_and_grad(&inst, &down).0) / (2.0 * h);
                let analytic = if which == 0 { gq[d] } else { gk[d] };
                let e = relative_error(analytic, numeric, 1e-9);
                assert!(e < 1e-5, "seed {seed} {location:?}/{form:?} param {which}/{d}: {analytic} vs {numeric} ({e:e})");
            }
        }
    }

    #[test]
    fn gate_weights_match_finite_differences() {
        for seed in 0..10 {
            check(seed, GateLocation::PreSoftmax, GateForm::Additive);
        }
    }

    #[test]
    fn gate_weights_match_finite_differences_all_variants() {
        for location in [GateLocation::PreSoftmax, GateLocation::PostSoftmax] {
            for form in [GateForm::Additive, GateForm::Multiplicative] {
                for seed in 100..103 {
                    check(seed, location, form);
                }
            }
        }
    }

    #[test]
    fn key_gate_gradient_vanishes_without_visual_keys() {
        let inst = instance(
            3,
            SegmentMap::contiguous(1, 0, 3, 0),
            GateLocation::PreSoftmax,
            GateForm::Additive,
        );
        let gate = LayerGate {
            w_q: vec![0.4, -0.3],
            w_k: vec![0.2, 0.5],
        };
        let (_, _, gk) = loss_and_grad(&inst, &gate);
        assert!(gk.iter().all(|&g| g == 0.0), "{gk:?}");
    }
}
