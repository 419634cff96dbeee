use std::collections::BTreeSet;

use proptest::prelude::*;

use super::*;
use crate::interventions::{InterventionSpec, LayerPlan, RoutingMode};
use crate::numerics::{grad_check, GradCheckOptions, Rng, Scalar, Tape, Tensor};
use crate::Error;

fn tiny() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_head: 4,
        n_directions: 2,
        temperature: 5.0,
        vocab_size: 11,
        max_seq_len: 8,
        ffn_mult: 2,
        router_hidden: 6,
        routing_enabled: true,
    }
}

/// Initializes and then perturbs every parameter so that no gradient is
/// trivially zero (the router's last layer starts at zero).
fn jittered<T: Scalar>(cfg: &ModelConfig, seed: u64, scale: f64) -> RoutedLm<T> {
    let mut m = RoutedLm::<T>::init(cfg, seed).unwrap();
    let mut rng = Rng::new(seed ^ 0x5eed);
    for p in m.params_mut() {
        for x in p.data_mut() {
            *x += T::lit(rng.normal(0.0, scale));
        }
    }
    m
}

fn seq(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<u32> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| rng.below(cfg.vocab_size) as u32).collect()
}

#[test]
fn normalize_examples() {
    let bank = Tensor::<f64>::from_f64([3, 2], &[3.0, 4.0, 0.6, 0.8, 0.0, 0.0]).unwrap();
    let unit = normalize_directions(&bank).unwrap();
    assert_eq!(unit.row(0), &[0.6, 0.8]);
    assert!((unit.row(1)[0] - 0.6).abs() < 1e-15 && (unit.row(1)[1] - 0.8).abs() < 1e-15);
    assert_eq!(unit.row(2), &[0.0, 0.0]);
}

#[test]
fn suppress_examples() {
    let e1 = Tensor::<f64>::from_f64([1, 2], &[1.0, 0.0]).unwrap();
    assert_eq!(suppress(&[3.0, 4.0], &e1, &[0.0]).unwrap(), vec![3.0, 4.0]);
    assert_eq!(suppress(&[3.0, 4.0], &e1, &[1.0]).unwrap(), vec![0.0, 4.0]);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let two = Tensor::<f64>::from_f64([2, 2], &[1.0, 0.0, s, s]).unwrap();
    let out = suppress(&[1.0, 0.0], &two, &[1.0, 1.0]).unwrap();
    assert!((out[0] + 0.5).abs() < 1e-12 && (out[1] + 0.5).abs() < 1e-12, "{out:?}");
}

#[test]
fn orthonormal_full_suppression_is_idempotent() {
    let mut rng = Rng::new(4);
    for _ in 0..20 {
        // Gram-Schmidt on two random 5-vectors
        let a: Vec<f64> = (0..5).map(|_| rng.standard_normal()).collect();
        let b: Vec<f64> = (0..5).map(|_| rng.standard_normal()).collect();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let u: Vec<f64> = a.iter().map(|x| x / na).collect();
        let dot = b.iter().zip(&u).map(|(x, y)| x * y).sum::<f64>();
        let w: Vec<f64> = b.iter().zip(&u).map(|(x, y)| x - dot * y).collect();
        let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let w: Vec<f64> = w.iter().map(|x| x / nw).collect();
        let dirs = Tensor::<f64>::from_f64([2, 5], &[u, w].concat()).unwrap();
        let o: Vec<f64> = (0..5).map(|_| rng.standard_normal()).collect();
        let once = suppress(&o, &dirs, &[1.0, 1.0]).unwrap();
        let twice = suppress(&once, &dirs, &[1.0, 1.0]).unwrap();
        for (x, y) in once.iter().zip(&twice) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

proptest! {
    #[test]
    fn single_direction_never_grows(
        o in prop::collection::vec(-10.0f64..10.0, 6),
        d in prop::collection::vec(-1.0f64..1.0, 6),
        r in 0.0f64..=1.0,
    ) {
        let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assume!(norm > 1e-3);
        let unit: Vec<f64> = d.iter().map(|x| x / norm).collect();
        let dirs = Tensor::<f64>::from_f64([1, 6], &unit).unwrap();
        let out = suppress(&o, &dirs, &[r]).unwrap();
        let n_in = o.iter().map(|x| x * x).sum::<f64>().sqrt();
        let n_out = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(n_out <= n_in + 1e-9);
    }
}

#[test]
fn router_neutral_start_and_hand_value() {
    let cfg = tiny();
    let mut m = RoutedLm::<f64>::init(&cfg, 1).unwrap();
    let x = Tensor::<f64>::from_fn([3, cfg.d_model], |i| (i as f64 * 0.37).sin());
    let r = router_forward(&m, 0, &x).unwrap();
    assert_eq!(r.shape(), &[2, 2]);
    assert!(r.data().iter().all(|&v| v == 0.5));
    m.blocks[0].router.as_mut().unwrap().layers[3].bias.data_mut()[0] = 1.0;
    let r = router_forward(&m, 0, &x).unwrap();
    assert!((r.data()[0] - 0.993307).abs() < 5e-7, "{}", r.data()[0]);
    assert_eq!(r.data()[1], 0.5);
}

#[test]
fn router_ignores_row_order() {
    let cfg = tiny();
    let m = jittered::<f64>(&cfg, 2, 0.3);
    let x = Tensor::<f64>::from_fn([5, cfg.d_model], |i| ((i * 7 % 13) as f64).cos());
    let mut rows: Vec<usize> = (0..5).collect();
    Rng::new(9).shuffle(&mut rows);
    let y = Tensor::new([5, cfg.d_model], rows.iter().flat_map(|&i| x.row(i).to_vec()).collect()).unwrap();
    assert_eq!(router_forward(&m, 1, &x).unwrap(), router_forward(&m, 1, &y).unwrap());
}

#[test]
fn routing_off_matches_baseline() {
    fn check<T: Scalar>(tol: f64) {
        let cfg = tiny();
        let m = jittered::<T>(&cfg, 3, 0.2);
        let base = m.to_baseline();
        let tokens = seq(&cfg, 7, 1);
        let off = InterventionSpec::all_layers(cfg.n_layers, RoutingMode::Off);
        let (a, _) = lm_forward(&m, &tokens, Some(&off), false).unwrap();
        let (b, _) = lm_forward(&base, &tokens, None, false).unwrap();
        assert!(a.max_abs_diff(&b).as_f64() < tol);
    }
    check::<f64>(1e-12);
    check::<f32>(1e-5);
}

#[test]
fn trace_pre_equals_post_when_routing_is_zero() {
    let cfg = tiny();
    let m = jittered::<f64>(&cfg, 4, 0.2);
    let tokens = seq(&cfg, 6, 2);
    let off = InterventionSpec::all_layers(cfg.n_layers, RoutingMode::Off);
    let (_, tr) = lm_forward(&m, &tokens, Some(&off), true).unwrap();
    for l in tr.unwrap().layers {
        assert_eq!(l.head_raw, l.head_suppressed);
        assert!(l.routing.unwrap().data().iter().all(|&r| r == 0.0));
    }
    let (_, tr) = lm_forward(&m, &tokens, None, true).unwrap();
    let tr = tr.unwrap();
    assert!(tr.layers.iter().any(|l| l.head_raw != l.head_suppressed));
    let dec = tr.routing_decision().unwrap();
    assert_eq!(dec.layers.len(), 2);
    assert_eq!(dec.pooled[0].shape(), &[cfg.d_model]);
    assert!(dec.flatten().iter().all(|&r| (0.0..=1.0).contains(&r)));
}

#[test]
fn single_token_attends_to_itself() {
    let cfg = tiny();
    let m = jittered::<f64>(&cfg, 5, 0.2);
    let (_, tr) = lm_forward(&m, &[3], None, true).unwrap();
    let l0 = &tr.unwrap().layers[0];
    assert!(l0.attention.data().iter().all(|&p| p == 1.0));
    // value transform of the normalized embedding
    let x = Tensor::new([1, cfg.d_model], m.tok_emb.row(3).to_vec()).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let g = tape.constant(m.blocks[0].attn_norm.clone());
    let a = tape.layer_norm(xv, g, None, NORM_EPS).unwrap();
    let v = tape.value(a).matmul(&m.blocks[0].wv).unwrap();
    assert!(v.max_abs_diff(&l0.head_raw) < 1e-12);
}

#[test]
fn knocking_out_every_head_passes_residual_through() {
    let cfg = tiny();
    let m = jittered::<f64>(&cfg, 6, 0.2);
    let mut spec = InterventionSpec::new();
    for h in 0..cfg.n_heads {
        spec = spec.with_knockout(0, h);
    }
    let comps = Components {
        ffn: false,
        ..Components::default()
    };
    let tokens = seq(&cfg, 5, 3);
    let out = forward_batch(&m, &[&tokens], Some(&spec), &comps, true).unwrap();
    let l0 = &out.traces.unwrap()[0].layers[0];
    assert_eq!(l0.residual_in, l0.residual_out);
}

#[test]
fn forward_errors_and_determinism() {
    let cfg = tiny();
    let m = jittered::<f32>(&cfg, 7, 0.2);
    assert!(matches!(lm_forward(&m, &[1, 11], None, false), Err(Error::Input(_))));
    assert!(matches!(lm_forward(&m, &[1; 9], None, false), Err(Error::Contract(_))));
    let tokens = seq(&cfg, 8, 4);
    let (a, _) = lm_forward(&m, &tokens, None, false).unwrap();
    let (b, _) = lm_forward(&m, &tokens, None, false).unwrap();
    assert_eq!(a, b);
    assert!(a.is_finite());
    for row in log_softmax_rows(&a) {
        let total: f64 = row.iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
}

#[test]
fn batched_matches_single() {
    let cfg = tiny();
    let m = jittered::<f64>(&cfg, 8, 0.2);
    let s1 = seq(&cfg, 6, 5);
    let s2 = seq(&cfg, 6, 6);
    let out = forward_batch(&m, &[&s1, &s2], None, &Components::default(), true).unwrap();
    let traces = out.traces.unwrap();
    for (s, (logits, tr)) in [&s1, &s2].into_iter().zip(out.logits.iter().zip(&traces)) {
        let (single, single_tr) = lm_forward(&m, s, None, true).unwrap();
        assert!(single.max_abs_diff(logits) < 1e-12);
        let single_tr = single_tr.unwrap();
        for (a, b) in single_tr.layers.iter().zip(&tr.layers) {
            assert!(a.routing.as_ref().unwrap().max_abs_diff(b.routing.as_ref().unwrap()) < 1e-12);
            assert!(a.attention.max_abs_diff(&b.attention) < 1e-12);
        }
    }
}

#[test]
fn layer0_routing_is_permutation_invariant() {
    let cfg = tiny();
    let m = jittered::<f64>(&cfg, 9, 0.3);
    let tokens = seq(&cfg, 8, 7);
    let mut shuffled = tokens.clone();
    Rng::new(1).shuffle(&mut shuffled);
    assert_ne!(tokens, shuffled);
    let a = routing_decision(&m, &tokens).unwrap().unwrap();
    let b = routing_decision(&m, &shuffled).unwrap().unwrap();
    assert_eq!(a.layers[0], b.layers[0]);
    assert_ne!(a.layers[1], b.layers[1]);
}

#[test]
fn overrides_and_supplied_routing_take_effect() {
    let cfg = tiny();
    let m = jittered::<f64>(&cfg, 10, 0.2);
    let tokens = seq(&cfg, 5, 8);
    let supplied = vec![vec![0.1, 0.2], vec![0.3, 0.4]];
    let spec = InterventionSpec::new()
        .with_mode(0, RoutingMode::Supplied(supplied))
        .with_mode(1, RoutingMode::Neutral)
        .with_override(1, 1, 0, 1.0)
        .with_override(0, 0, 1, 0.9);
    let (_, tr) = lm_forward(&m, &tokens, Some(&spec), true).unwrap();
    let tr = tr.unwrap();
    assert_eq!(tr.layers[0].routing.as_ref().unwrap().data(), &[0.1, 0.9, 0.3, 0.4]);
    assert_eq!(tr.layers[1].routing.as_ref().unwrap().data(), &[0.5, 0.5, 1.0, 0.5]);
}

#[test]
fn gradients_pass_finite_difference_check() {
    let cfg = tiny();
    let m = jittered::<f64>(&cfg, 11, 0.3);
    let names = m.param_names();
    let params: Vec<Tensor<f64>> = m.named_params().into_iter().map(|(_, t)| t.clone()).collect();
    let s1 = seq(&cfg, 5, 9);
    let s2 = seq(&cfg, 5, 10);
    let plans: Vec<LayerPlan> = (0..cfg.n_layers).map(|_| LayerPlan::learned()).collect();
    let loss = |tape: &mut Tape<f64>, vars: &[crate::numerics::Var]| {
        let mv = ModelVars::from_slice(&cfg, vars)?;
        let fwd = forward_on_tape(tape, &mv, &cfg, &[&s1[..4], &s2[..4]], &plans, &Components::default())?;
        let targets: Vec<usize> = s1[1..].iter().chain(&s2[1..]).map(|&t| t as usize).collect();
        tape.cross_entropy(fwd.logits, &targets)
    };
    let opts = GradCheckOptions {
        max_coords_per_param: Some(12),
        ..GradCheckOptions::for_precision::<f64>()
    };
    let report = grad_check(&params, &opts, loss).unwrap();
    assert!(report.passed(), "{report}");

    // every parameter class receives signal
    let mut tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
    let l = loss(&mut tape, &vars).unwrap();
    tape.backward(l).unwrap();
    let mut seen = BTreeSet::new();
    for ((name, v), p) in names.iter().zip(&vars).zip(&params) {
        let g = tape.grad(*v);
        assert_eq!(g.shape(), p.shape());
        if g.l2_norm() > 0.0 {
            seen.insert(ParamClass::of(name));
        }
    }
    assert_eq!(seen.len(), 8, "{seen:?}");
}

#[test]
fn model_vars_round_trip_order() {
    let cfg = tiny();
    let m = RoutedLm::<f64>::init(&cfg, 1).unwrap();
    let mut tape = Tape::new();
    let mv = ModelVars::bind(&mut tape, &m, true);
    let all = mv.all();
    assert_eq!(all.len(), m.param_names().len());
    let again = ModelVars::from_slice(&cfg, &all).unwrap();
    assert_eq!(again.all(), all);
    for ((_, t), v) in m.named_params().into_iter().zip(&all) {
        assert_eq!(tape.value(*v), t);
    }
}
