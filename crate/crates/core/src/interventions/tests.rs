use super::*;
use crate::model::{lm_forward, ModelConfig, RoutedLm, NORM_EPS};
use crate::numerics::{Rng, Tensor};
use crate::Error;

fn cfg() -> ModelConfig {
    ModelConfig {
        n_layers: 3,
        n_heads: 2,
        d_model: 16,
        d_head: 8,
        n_directions: 3,
        vocab_size: 20,
        max_seq_len: 16,
        router_hidden: 8,
        ..ModelConfig::toy()
    }
}

/// Random model whose router actually varies with the input.
fn model() -> RoutedLm<f64> {
    let mut m = RoutedLm::<f64>::init(&cfg(), 7).unwrap();
    let mut rng = Rng::new(70);
    for p in m.params_mut() {
        for x in p.data_mut() {
            *x += rng.normal(0.0, 0.2);
        }
    }
    m
}

fn seq(seed: u64, n: usize) -> Vec<u32> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| rng.below(20) as u32).collect()
}

fn logits(m: &RoutedLm<f64>, s: &[u32], spec: &InterventionSpec) -> Tensor<f64> {
    forward_with_interventions(m, s, spec).unwrap().0
}

#[test]
fn empty_spec_is_bitwise_plain_forward() {
    let m = model();
    let s = seq(1, 10);
    let (plain, _) = lm_forward(&m, &s, None, false).unwrap();
    assert_eq!(logits(&m, &s, &InterventionSpec::new()), plain);
}

#[test]
fn three_routes_to_no_suppression() {
    let m = model();
    let c = cfg();
    let s = seq(2, 12);
    let off = logits(&m, &s, &InterventionSpec::all_layers(c.n_layers, RoutingMode::Off));
    let zeros = InterventionSpec::all_layers(c.n_layers, RoutingMode::Supplied(vec![vec![0.0; 3]; 2]));
    let supplied = logits(&m, &s, &zeros);
    let (base, _) = lm_forward(&m.to_baseline(), &s, None, false).unwrap();
    assert!(off.max_abs_diff(&supplied) < 1e-6);
    assert!(off.max_abs_diff(&base) < 1e-6);
    assert!(supplied.max_abs_diff(&base) < 1e-6);
}

#[test]
fn mode_algebra() {
    let m = model();
    let c = cfg();
    let s = seq(3, 9);
    for (w, mode) in [(0.0, RoutingMode::Off), (0.5, RoutingMode::Neutral), (1.0, RoutingMode::Full)] {
        let a = logits(&m, &s, &InterventionSpec::all_layers(c.n_layers, RoutingMode::Fixed(w)));
        let b = logits(&m, &s, &InterventionSpec::all_layers(c.n_layers, mode));
        assert!(a.max_abs_diff(&b) < 1e-6);
    }
}

fn layer_norm_rows(x: &Tensor<f64>, gain: &Tensor<f64>) -> Tensor<f64> {
    let d = x.cols();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        out.extend(row.iter().zip(gain.data()).map(|(v, g)| (v - mean) * inv * g));
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

#[test]
fn knocking_out_every_head_leaves_an_attention_free_network() {
    let m = model();
    let c = cfg();
    let s = seq(4, 8);
    let mut spec = InterventionSpec::new();
    for l in 0..c.n_layers {
        for h in 0..c.n_heads {
            spec = spec.with_knockout(l, h);
        }
    }
    let got = logits(&m, &s, &spec);

    // residual stream + FFNs only
    let rows: Vec<f64> = s.iter().flat_map(|&t| m.tok_emb.row(t as usize).to_vec()).collect();
    let mut x = Tensor::new([s.len(), c.d_model], rows).unwrap();
    for b in &m.blocks {
        let f = layer_norm_rows(&x, &b.ffn_norm);
        let up = f.matmul(&b.w_up).unwrap().map(gelu);
        let down = up.matmul(&b.w_down).unwrap();
        let sum: Vec<f64> = x.data().iter().zip(down.data()).map(|(a, b)| a + b).collect();
        x = Tensor::new(x.shape().to_vec(), sum).unwrap();
    }
    let expect = layer_norm_rows(&x, &m.final_norm)
        .matmul(&m.tok_emb.transpose2().unwrap())
        .unwrap();
    assert!(got.max_abs_diff(&expect) < 1e-9, "{}", got.max_abs_diff(&expect));
}

#[test]
fn override_wins_over_mode() {
    let m = model();
    let s = seq(5, 6);
    let spec = InterventionSpec::new()
        .with_mode(1, RoutingMode::Full)
        .with_override(1, 1, 2, 0.0)
        .with_override(2, 0, 0, 0.25);
    let (_, tr) = forward_with_interventions(&m, &s, &spec).unwrap();
    let r1 = tr.layers[1].routing.as_ref().unwrap();
    assert_eq!(r1.data(), &[1.0, 1.0, 1.0, 1.0, 1.0, 0.0]);
    assert_eq!(tr.layers[2].routing.as_ref().unwrap().data()[0], 0.25);
}

#[test]
fn upstream_and_same_layer_routing_untouched() {
    let m = model();
    let s = seq(6, 10);
    let (_, plain) = lm_forward(&m, &s, None, true).unwrap();
    let plain = plain.unwrap();
    let spec = InterventionSpec::new().with_mode(2, RoutingMode::Full).with_knockout(1, 0);
    let (_, tr) = forward_with_interventions(&m, &s, &spec).unwrap();
    // layer 1's router reads the layer input, which the knockout does not touch
    for l in 0..2 {
        assert_eq!(tr.layers[l].routing, plain.layers[l].routing);
    }
    assert_ne!(tr.layers[2].routing, plain.layers[2].routing);
}

#[test]
fn invalid_spec_is_rejected() {
    let m = model();
    let s = seq(7, 5);
    let spec = InterventionSpec::new().with_knockout(0, 9);
    assert!(matches!(forward_with_interventions(&m, &s, &spec), Err(Error::Spec(_))));
}

#[test]
fn sweep_shape_and_determinism() {
    let m = model();
    let seqs = vec![seq(8, 12), seq(9, 12), seq(10, 7)];
    let a = layer_knockout_sweep(&m, &seqs).unwrap();
    let b = layer_knockout_sweep(&m, &seqs).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 3);
    for r in &a.rows {
        assert!((r.ppl - a.baseline_ppl - r.delta_ppl).abs() < 1e-12);
    }
    let direct = corpus_nll(&m, &seqs, None).unwrap();
    assert_eq!(direct.count, 11 + 11 + 6);
}

#[test]
fn swap_identities() {
    let m = model();
    let a = seq(11, 10);
    let b = seq(12, 10);
    let same = routing_swap(&m, &a, &a, &[0, 1, 2]).unwrap();
    assert_eq!(same.delta_a, 0.0);
    assert_eq!(same.delta_b, 0.0);
    let none = routing_swap(&m, &a, &b, &[]).unwrap();
    assert_eq!(none.delta_a, 0.0);
    assert_eq!(none.delta_b, 0.0);
    let some = routing_swap(&m, &a, &b, &[0]).unwrap();
    assert!(some.delta_a != 0.0);
}

#[test]
fn category_override_to_learned_is_a_no_op() {
    let m = model();
    let seqs = vec![seq(13, 9), seq(14, 6)];
    let dirs = [(0, 0, 1), (2, 1, 0)];
    let r = category_override(&m, &seqs, &dirs, &[3, 4, 5], &RoutingMode::Learned).unwrap();
    assert_eq!(r.delta, 0.0);
    let full = category_override(&m, &seqs, &dirs, &[3, 4, 5], &RoutingMode::Full).unwrap();
    assert!(full.delta != 0.0);
    assert!(full.p_normal > 0.0 && full.p_normal < 1.0);
    assert!(matches!(
        category_override(&m, &seqs, &[], &[3], &RoutingMode::Full),
        Err(Error::Spec(_))
    ));
}
