use proptest::prelude::*;

use super::*;
use crate::interventions::{corpus_nll, InterventionSpec, RoutingMode};
use crate::model::{forward_batch, routing_decision, Components, ModelConfig, RoutedLm};
use crate::numerics::{Rng, Tensor};
use crate::training::{make_induction_corpus, Corpus, Document};
use crate::Error;

fn cfg(n_layers: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
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

fn model_with(config: &ModelConfig, seed: u64) -> RoutedLm<f64> {
    let mut m = RoutedLm::<f64>::init(config, seed).unwrap();
    let mut rng = Rng::new(seed + 100);
    for p in m.params_mut() {
        for x in p.data_mut() {
            *x += rng.normal(0.0, 0.2);
        }
    }
    m
}

fn model() -> RoutedLm<f64> {
    model_with(&cfg(3), 5)
}

fn seq(seed: u64, n: usize, vocab: usize) -> Vec<u32> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| rng.below(vocab) as u32).collect()
}

fn vec_mat(v: &[f64], m: &Tensor<f64>) -> Vec<f64> {
    (0..m.cols()).map(|c| (0..v.len()).map(|j| v[j] * m.at2(j, c)).sum()).collect()
}

fn dotv(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---- attribution ----

#[test]
fn linear_attribution_recovers_additive_terms_without_ffn() {
    let m = model_with(&cfg(1), 11);
    let s = seq(1, 7, 20);
    let target = 4;
    let base = Components {
        ffn: false,
        linearize: true,
        ..Components::default()
    };
    let rep = logit_attribution_with(&m, &s, target, base).unwrap();
    let out = forward_batch(&m, &[&s[..]], None, &base, true).unwrap();
    let tr = &out.traces.unwrap()[0].layers[0];
    let last = s.len() - 1;
    let o = tr.head_raw.row(last);
    let o2 = tr.head_suppressed.row(last);
    let delta: Vec<f64> = o2.iter().zip(o).map(|(a, b)| a - b).collect();
    let e = m.tok_emb.row(target as usize);
    let raw = dotv(&vec_mat(o, &m.blocks[0].wo), e);
    let del = dotv(&vec_mat(&delta, &m.blocks[0].wo), e);
    let emb = dotv(m.tok_emb.row(s[last] as usize), e);
    assert!((rep.raw_heads - raw).abs() < 1e-9);
    assert!((rep.routing_delta - del).abs() < 1e-9);
    assert_eq!(rep.ffn, 0.0);
    assert!((rep.embedding - rep.full_logit).abs() < 1e-9);
    assert!((emb + raw + del - rep.full_logit).abs() < 1e-9);
}

#[test]
fn linear_attribution_ffn_row_is_its_direct_term() {
    let m = model_with(&cfg(1), 12);
    let s = seq(2, 6, 20);
    let target = 9;
    let base = Components {
        linearize: true,
        ..Components::default()
    };
    let rep = logit_attribution_with(&m, &s, target, base).unwrap();
    let out = forward_batch(&m, &[&s[..]], None, &base, true).unwrap();
    let tr = &out.traces.unwrap()[0].layers[0];
    let last = s.len() - 1;
    let b = &m.blocks[0];
    let attn = vec_mat(tr.head_suppressed.row(last), &b.wo);
    let mid: Vec<f64> = m.tok_emb.row(s[last] as usize).iter().zip(&attn).map(|(x, a)| x + a).collect();
    let f = vec_mat(&vec_mat(&mid, &b.w_up), &b.w_down);
    let e = m.tok_emb.row(target as usize);
    assert!((rep.ffn - dotv(&f, e)).abs() < 1e-9);
    assert!((rep.full_logit - dotv(&mid, e) - dotv(&f, e)).abs() < 1e-9);
}

#[test]
fn routing_delta_row_matches_all_off() {
    let m = model();
    let s = seq(3, 9, 20);
    let rep = logit_attribution(&m, &s, 7).unwrap();
    let (normal, _) = crate::model::lm_forward(&m, &s, None, false).unwrap();
    let off = InterventionSpec::all_layers(3, RoutingMode::Off);
    let (zero, _) = crate::model::lm_forward(&m, &s, Some(&off), false).unwrap();
    let want = normal.at2(8, 7) - zero.at2(8, 7);
    assert!((rep.routing_delta - want).abs() < 1e-5);
    assert_eq!(rep.rows().len(), 4);
}

#[test]
fn routing_delta_is_zero_without_routing() {
    let m = model().to_baseline();
    let rep = logit_attribution(&m, &seq(4, 5, 20), 3).unwrap();
    assert_eq!(rep.routing_delta, 0.0);
    assert!(matches!(logit_attribution(&m, &[1, 2], 99), Err(Error::Input(_))));
}

// ---- induction ----

fn previous_copy(tokens: &[u32], pos: usize) -> u32 {
    let t = tokens[pos];
    let prev = (0..pos).rev().find(|&j| tokens[j] == t).unwrap();
    tokens[prev + 1]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn oracle_predictor_is_perfect(seed in 0u64..1000, p in 1usize..6, extra in 0usize..20, v in 0usize..40) {
        let n = 2 * p + 1 + extra;
        let vocab = p + 2 + v;
        let c = make_induction_corpus(&mut Rng::new(seed), 5, n, vocab, p).unwrap();
        prop_assert_eq!(induction_accuracy_with(&c, previous_copy).unwrap(), 1.0);
    }
}

#[test]
fn uniform_predictor_sits_at_chance() {
    let vocab = 50;
    let c = make_induction_corpus(&mut Rng::new(3), 2000, 24, vocab, 8).unwrap();
    let mut rng = Rng::new(4);
    let acc = induction_accuracy_with(&c, |_, _| rng.below(vocab) as u32).unwrap();
    let n = c.num_queries() as f64;
    let p = 1.0 / vocab as f64;
    let sigma = (p * (1.0 - p) / n).sqrt();
    assert!((acc - p).abs() <= 3.0 * sigma, "{acc}");
}

#[test]
fn accuracy_needs_queries() {
    let c = Corpus::from_text("abcdef");
    assert!(matches!(induction_accuracy_with(&c, |_, _| 0), Err(Error::Input(_))));
    assert!(matches!(induction_accuracy(&model(), &c, None), Err(Error::Input(_))));
}

#[test]
fn model_accuracy_and_table_shape() {
    let m = model();
    let c = make_induction_corpus(&mut Rng::new(8), 6, 12, 20, 3).unwrap();
    let acc = induction_accuracy(&m, &c, None).unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let t = induction_table(&m, &c, 3).unwrap();
    assert_eq!(t.rows.len(), 3);
    assert_eq!(t.rows[0].accuracy, acc);
    assert_eq!(t.knocked_out.len(), 3);
    assert_eq!(t.queries, 18);
    let scores = induction_head_scores(&m, &c).unwrap();
    assert_eq!(scores.len(), 6);
    assert!(scores.iter().all(|(_, s)| (0.0..=1.0).contains(s)));
}

#[test]
fn argmax_prefers_smaller_id() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    assert_eq!(argmax(&[0.0f32]), 0);
}

// ---- perplexity, sharpness, position ----

#[test]
fn untrained_byte_model_is_near_uniform() {
    let c = ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        d_head: 8,
        max_seq_len: 32,
        router_hidden: 8,
        ..ModelConfig::toy()
    };
    let m = RoutedLm::<f64>::init(&c, 1).unwrap();
    let corpus = Corpus::from_domains(&[
        ("prose", "the quick brown fox jumps over the lazy dog".into()),
        ("code", "fn main() { println!(\"hi\"); }".into()),
    ]);
    let rep = domain_perplexity(&m, &corpus, None).unwrap();
    assert_eq!(rep.domains.len(), 2);
    for d in &rep.domains {
        assert!((d.ppl / 256.0 - 1.0).abs() < 0.1, "{}", d.ppl);
    }
    let nll: f64 = rep.domains.iter().map(|d| d.ppl.ln() * d.tokens as f64).sum();
    let count: usize = rep.domains.iter().map(|d| d.tokens).sum();
    assert!((rep.overall - (nll / count as f64).exp()).abs() < 1e-9);
}

#[test]
fn sharpness_limits() {
    let v = 37;
    let uniform = vec![-(v as f64).ln(); v];
    let (top, ent) = row_sharpness(&uniform);
    assert!((top - 1.0 / v as f64).abs() < 1e-12);
    assert!((ent - (v as f64).ln()).abs() < 1e-12);
    let mut one_hot = vec![f64::NEG_INFINITY; v];
    one_hot[3] = 0.0;
    assert_eq!(row_sharpness(&one_hot), (1.0, 0.0));
    let s = sharpness_stats(&model(), &[seq(1, 6, 20), seq(2, 4, 20)], None).unwrap();
    assert_eq!(s.positions, 10);
    assert!(s.top1 > 0.0 && s.top1 <= 1.0 && s.entropy >= 0.0);
}

#[test]
fn buckets_partition_positions() {
    for p in 0..300 {
        let hits = POSITION_BUCKETS
            .iter()
            .filter(|&&(lo, hi)| p >= lo && hi.is_none_or(|h| p < h))
            .count();
        assert_eq!(hits, 1);
    }
    assert_eq!(bucket_of(9), 0);
    assert_eq!(bucket_of(10), 1);
    assert_eq!(bucket_of(99), 2);
    assert_eq!(bucket_of(100), 3);
}

#[test]
fn position_benefit_of_unrouted_model_is_zero() {
    let m = model().to_baseline();
    let seqs = vec![seq(1, 14, 20), seq(2, 16, 20)];
    let b = position_benefit(&m, &seqs, None).unwrap();
    assert_eq!(b[0].count, 20);
    assert_eq!(b[1].count, 8);
    assert_eq!(b[0].delta_log_prob, Some(0.0));
    assert_eq!(b[2].delta_log_prob, None);
    let routed = position_benefit(&model(), &seqs, None).unwrap();
    assert!(routed[0].delta_log_prob.unwrap() != 0.0);
}

// ---- grids ----

#[test]
fn grid_matches_mode_algebra() {
    let m = model();
    let seqs = vec![seq(5, 10, 20), seq(6, 8, 20)];
    let g = fixed_weight_grid(&m, &seqs, &[0.0, 0.5, 1.0]).unwrap();
    for (row, mode) in g.rows.iter().zip([RoutingMode::Off, RoutingMode::Neutral, RoutingMode::Full]) {
        let spec = InterventionSpec::all_layers(3, mode);
        let ppl = corpus_nll(&m, &seqs, Some(&spec)).unwrap().ppl();
        assert!((row.ppl - ppl).abs() < 1e-4);
    }
    assert_eq!(g.learned_ppl, corpus_nll(&m, &seqs, None).unwrap().ppl());
    assert!(g.rows.iter().all(|r| r.ppl >= g.best_ppl));
}

#[test]
fn grid_ties_go_to_smaller_w() {
    let mut m = model();
    for b in &mut m.blocks {
        b.directions.as_mut().unwrap().data_mut().fill(0.0);
    }
    let g = fixed_weight_grid(&m, &[seq(7, 9, 20)], &[0.8, 0.3, 0.6]).unwrap();
    assert_eq!(g.best_w, 0.3);
    assert!(fixed_weight_grid(&m, &[seq(7, 9, 20)], &[]).is_err());
}

#[test]
fn additivity_definitions() {
    let m = model();
    let seqs = vec![seq(8, 10, 20)];
    let a = layer_additivity(&m, &seqs, &[vec![], vec![1], vec![0, 2]]).unwrap();
    assert_eq!(a.singletons.len(), 3);
    assert_eq!(a.sets[0].delta_loss, 0.0);
    assert_eq!(a.sets[0].interaction, 0.0);
    assert_eq!(a.sets[1].interaction, 0.0);
    let s = &a.sets[2];
    assert!((s.interaction - (s.delta_loss - a.singletons[0] - a.singletons[2])).abs() < 1e-15);
    assert!(layer_additivity(&m, &seqs, &[vec![5]]).is_err());
}

// ---- routing statistics ----

#[test]
fn hand_built_variances() {
    let means = vec![vec![0.2, 0.8], vec![0.5, 0.5]];
    let s = stats_from_means(2, vec!["a".into(), "b".into()], &means, &[vec![0.2, 0.8, 0.5, 0.5]]).unwrap();
    assert!((s.heads[0].variance - 0.09).abs() < 1e-15);
    assert_eq!(s.heads[1].variance, 0.0);
    assert!(s.heads[0].specialist && !s.heads[1].specialist);
    assert_eq!(s.layers[0].histogram.iter().sum::<usize>(), 4);
    assert_eq!(s.layers[0].max, 0.8);
    assert!((s.layers[0].std - 0.045f64.sqrt()).abs() < 1e-12);
}

#[test]
fn identical_routing_makes_every_head_a_tied_specialist() {
    let means = vec![vec![0.4, 0.4]; 8];
    let s = stats_from_means(4, vec!["x".into(), "y".into()], &means, &[vec![0.4; 4], vec![0.4; 4]]).unwrap();
    assert!(s.heads.iter().all(|h| h.variance == 0.0 && h.specialist));
    assert_eq!(s.specialist_threshold, 0.0);
}

#[test]
fn specialists_are_the_global_top_quartile() {
    let v: Vec<f64> = (0..16).map(|i| i as f64).collect();
    let (flags, thr) = specialist_flags(&v);
    assert_eq!(thr, 12.0);
    assert_eq!(flags.iter().filter(|&&f| f).count(), 4);
    let (flags, _) = specialist_flags(&[1.0, 3.0, 3.0, 0.0, 0.0]);
    assert_eq!(flags, vec![false, true, true, false, false]);
}

#[test]
fn one_domain_is_rejected() {
    assert!(stats_from_means(1, vec!["a".into()], &[vec![0.1]], &[vec![0.1]]).is_err());
}

proptest! {
    #[test]
    fn streaming_and_two_pass_variance_agree(xs in prop::collection::vec(-10.0f64..10.0, 1..64)) {
        prop_assert!((population_variance(&xs) - welford_variance(&xs)).abs() < 1e-10);
        prop_assert!(population_variance(&xs) >= 0.0);
    }
}

#[test]
fn routing_stats_over_domains() {
    let m = model();
    let corpus = Corpus {
        kind: crate::training::CorpusKind::DomainTagged,
        docs: ["code", "prose", "code", "prose"]
            .iter()
            .enumerate()
            .map(|(i, l)| Document {
                label: Some(l.to_string()),
                tokens: seq(i as u64, 10, 20),
                queries: Vec::new(),
            })
            .collect(),
    };
    let s = routing_stats(&m, &corpus).unwrap();
    assert_eq!(s.domains, vec!["code", "prose"]);
    assert_eq!(s.heads.len(), 6);
    assert!(s.heads.iter().all(|h| h.variance >= 0.0));
    let expect: f64 = [0u64, 2]
        .iter()
        .map(|&i| {
            let r = routing_decision(&m, &seq(i, 10, 20)).unwrap().unwrap();
            r.layers[1].row(1).iter().sum::<f64>() / 3.0
        })
        .sum::<f64>()
        / 2.0;
    assert!((s.heads[3].domain_means[0] - expect).abs() < 1e-12);
    assert_eq!(s.layers[0].histogram.iter().sum::<usize>(), 4 * 6);
    assert!(routing_specialists(&s).len() >= 2);
}

// ---- fingerprints ----

fn labels(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

#[test]
fn identical_vectors_classify_at_chance() {
    let f = classify_vectors(&labels(&["a", "a", "b", "b"]), &vec![vec![0.3, 0.7]; 4]).unwrap();
    assert_eq!(f.accuracy, 0.5);
    assert_eq!(f.centroid_distances[0][1], 0.0);
}

#[test]
fn separated_vectors_classify_perfectly() {
    let vs = vec![vec![0.0, 0.0], vec![0.0, 0.1], vec![1.0, 1.0], vec![1.0, 0.9], vec![5.0, 5.0]];
    let f = classify_vectors(&labels(&["a", "a", "b", "b", "c"]), &vs).unwrap();
    assert_eq!(f.accuracy, 1.0);
    assert_eq!(f.evaluated, 4);
    assert_eq!(f.excluded, vec!["c"]);
    assert_eq!(f.confusion[0], vec![2, 0, 0]);
    assert_eq!(f.pca.len(), 5);
}

#[test]
fn pca_of_a_line() {
    let vs: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
    let (ev, coords) = pca2(&vs);
    assert!((ev[0] - 10.0).abs() < 1e-9);
    assert!(ev[1].abs() < 1e-9);
    let step = 5f64.sqrt();
    for (i, c) in coords.iter().enumerate() {
        assert!((c[0] - (i as f64 - 2.0) * step).abs() < 1e-9);
    }
}

#[test]
fn fingerprint_on_model() {
    let m = model();
    let data: Vec<(String, Vec<u32>)> = (0..6).map(|i| (format!("d{}", i % 2), seq(i, 8, 20))).collect();
    let f = fingerprint_classify(&m, &data).unwrap();
    assert_eq!(f.evaluated, 6);
    assert_eq!(f.confusion.iter().flatten().sum::<usize>(), 6);
}

#[test]
fn swap_leaves_layer_zero_routing_exactly() {
    let m = model();
    let seqs: Vec<Vec<u32>> = (0..5).map(|i| seq(i, 9, 20)).collect();
    let s = token_sensitivity(&m, &seqs, &mut Rng::new(2)).unwrap();
    assert_eq!(s.swap_per_layer[0], 0.0);
    assert!(s.replace >= 0.0 && s.swap >= 0.0);
    assert!(token_sensitivity(&m, &[vec![1]], &mut Rng::new(2)).is_err());
}

// ---- directions ----

#[test]
fn identity_projection_returns_padded_coordinates() {
    let unit = [0.6, -0.8];
    let eye = Tensor::<f64>::eye(4);
    let scores = project_direction(&unit, 1, &eye, &eye).unwrap();
    assert_eq!(scores, vec![0.0, 0.0, 0.6, -0.8]);
}

#[test]
fn projection_matches_exhaustive_enumeration() {
    let mut rng = Rng::new(9);
    let (d, dh, v) = (4, 2, 30);
    let wo = Tensor::from_fn([d, d], |_| rng.standard_normal());
    let lm = Tensor::from_fn([v, d], |_| rng.standard_normal());
    let unit = [0.28, 0.96];
    let mut all = Vec::new();
    for tok in 0..v {
        let mut s = 0.0;
        for c in 0..d {
            for j in 0..dh {
                s += unit[j] * wo.at2(dh + j, c) * lm.at2(tok, c);
            }
        }
        all.push((tok as u32, s));
    }
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let got = top_k(&project_direction(&unit, 1, &wo, &lm).unwrap(), 10);
    for (g, w) in got.iter().zip(&all) {
        assert_eq!(g.0, w.0);
        assert!((g.1 - w.1).abs() < 1e-12);
    }
    let scaled = lm.map(|x| 2.5 * x);
    let again = top_k(&project_direction(&unit, 1, &wo, &scaled).unwrap(), v);
    let ids: Vec<u32> = again.iter().map(|p| p.0).collect();
    let orig: Vec<u32> = top_k(&project_direction(&unit, 1, &wo, &lm).unwrap(), v).iter().map(|p| p.0).collect();
    assert_eq!(ids, orig);
}

#[test]
fn projection_ignores_direction_scale() {
    let m = model();
    let mut big = m.clone();
    for b in &mut big.blocks {
        for x in b.directions.as_mut().unwrap().data_mut() {
            *x *= 7.0;
        }
    }
    let a = vocab_projection(&m).unwrap();
    let b = vocab_projection(&big).unwrap();
    assert_eq!(a.len(), 18);
    for (x, y) in a.iter().zip(&b) {
        let ix: Vec<u32> = x.top.iter().map(|p| p.0).collect();
        let iy: Vec<u32> = y.top.iter().map(|p| p.0).collect();
        assert_eq!(ix, iy);
        assert_eq!(x.top.len(), 10);
    }
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

#[test]
fn categories_by_lexicon_and_precedence() {
    let arts = strings(&[" the", "a", "An", "the", " a", "an", "The", "a", "the", "an"]);
    assert_eq!(categorize(&arts), Category::Articles);
    let none = strings(&["cat", "river", "blue", "run", "x", "paris", "tokyo", "gold", "tree", "sky"]);
    assert_eq!(categorize(&none), Category::Content);
    let mixed = strings(&["the", "a", "an", ",", ".", ";", "cat", "dog", "of", "in"]);
    assert_eq!(categorize(&mixed), Category::Punctuation);
    let nums = strings(&["12", "3.5", "1,000", "seven", "cat", "dog", "x", "y", "z", "w"]);
    assert_eq!(categorize(&nums), Category::Numbers);
    let two = strings(&["the", "a", "cat", "dog", "x", "y", "z", "w", "v", "u"]);
    assert_eq!(categorize(&two), Category::Content);
    assert!(!is_punctuation(""));
    assert!(!is_punctuation(" "));
    assert!(is_punctuation("--"));
    assert!(!is_numeral("-"));
}

#[test]
fn high_bytes_are_not_punctuation() {
    assert_eq!(byte_token_text(b',' as u32), ",");
    assert_eq!(byte_token_text(0xE9), "<0xE9>");
    let high: Vec<String> = (0xF0..0xFA).map(byte_token_text).collect();
    assert_eq!(categorize(&high), Category::Content);
}

#[test]
fn distribution_sums_to_one_hundred() {
    let m = model();
    let rep = categorize_directions(&vocab_projection(&m).unwrap(), byte_token_text);
    let total: f64 = rep.distribution.iter().map(|(_, p)| p).sum();
    assert!((total - 100.0).abs() < 1e-9);
    assert_eq!(rep.directions.len(), 18);
    let n: usize = Category::ALL.iter().map(|&c| directions_in(&rep, c).len()).sum();
    assert_eq!(n, 18);
}

#[test]
fn geometry_reference_cases() {
    let mut rng = Rng::new(1);
    let ortho: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| f64::from(i == j)).collect()).collect();
    let g = geometry_of(&ortho, 4, &mut rng);
    assert!((g.within_head_mean_angle - 90.0).abs() < 1e-9);
    assert!((g.effective_rank - 4.0).abs() < 1e-9);
    let three: Vec<Vec<f64>> = ortho[..3].iter().map(|r| [r.clone(), vec![0.0; 4]].concat()).collect();
    assert!((effective_rank(&three) - 3.0).abs() < 1e-9);
    let same = vec![vec![0.6, 0.8]; 5];
    assert!((effective_rank(&same) - 1.0).abs() < 1e-9);
    let base = random_mean_angle(&mut Rng::new(4), 150, 128);
    assert!((base - 90.0).abs() < 1.0, "{base}");
    let mg = direction_geometry(&model(), &mut rng).unwrap();
    assert_eq!(mg.count, 18);
    assert!(mg.effective_rank <= 8.0 + 1e-9);
    assert!((mg.cosines[2][2] - 1.0).abs() < 1e-9);
}

// ---- CKA ----

fn centered_gram(x: &Tensor<f64>) -> Vec<Vec<f64>> {
    let n = x.rows();
    let k: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| dotv(x.row(i), x.row(j))).collect()).collect();
    let row: Vec<f64> = k.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let all = row.iter().sum::<f64>() / n as f64;
    (0..n).map(|i| (0..n).map(|j| k[i][j] - row[i] - row[j] + all).collect()).collect()
}

fn hsic_cka(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let (k, l) = (centered_gram(a), centered_gram(b));
    let tr = |p: &Vec<Vec<f64>>, q: &Vec<Vec<f64>>| -> f64 {
        p.iter().zip(q).map(|(r, s)| dotv(r, s)).sum()
    };
    tr(&k, &l) / (tr(&k, &k) * tr(&l, &l)).sqrt()
}

fn random(rng: &mut Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::from_fn([r, c], |_| rng.standard_normal())
}

#[test]
fn cka_identities_and_independent_oracle() {
    let mut rng = Rng::new(3);
    let x = random(&mut rng, 64, 8);
    let y = random(&mut rng, 64, 8);
    assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    let c = linear_cka(&x, &y).unwrap();
    assert!(c < 0.3, "{c}");
    assert!((c - hsic_cka(&x, &y)).abs() < 1e-10);
    // orthogonal rotation of the columns plus isotropic scaling
    let q = nalgebra::DMatrix::from_fn(8, 8, |_, _| rng.standard_normal()).qr().q();
    let rot = Tensor::from_fn([8, 8], |i| q[(i / 8, i % 8)]);
    let moved = x.matmul(&rot).unwrap().map(|v| 3.0 * v);
    assert!((linear_cka(&moved, &y).unwrap() - c).abs() < 1e-6);
    let flat = Tensor::<f64>::full([10, 3], 2.0);
    assert!(matches!(linear_cka(&flat, &random(&mut rng, 10, 3)), Err(Error::Undefined(_))));
    assert!(linear_cka(&x, &random(&mut rng, 10, 3)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn cka_is_bounded(seed in 0u64..10_000, n in 2usize..12, d1 in 1usize..5, d2 in 1usize..5) {
        let mut rng = Rng::new(seed);
        let c = linear_cka(&random(&mut rng, n, d1), &random(&mut rng, n, d2)).unwrap();
        prop_assert!((-1e-9..=1.0 + 1e-9).contains(&c));
    }
}

#[test]
fn routed_and_unrouted_streams() {
    let m = model();
    let seqs = vec![seq(1, 8, 20), seq(2, 5, 20)];
    let streams = residual_streams(&m, &seqs).unwrap();
    assert_eq!(streams.len(), 3);
    assert_eq!(streams[0].shape(), &[13, 16]);
    let same = layer_cka(&m, &m, &seqs).unwrap();
    assert!(same.per_layer.iter().all(|c| (c - 1.0).abs() < 1e-12));
    let other = layer_cka(&m, &m.to_baseline(), &seqs).unwrap();
    assert!(other.per_layer.iter().all(|c| (0.0..=1.0 + 1e-9).contains(c)));
}

// ---- factual probes ----

#[test]
fn routing_condition_rows() {
    let m = model();
    let s = seq(5, 7, 20);
    let rows = routing_conditions(&m, &s, 3).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.prob > 0.0 && r.prob < 1.0));
    let ko = mover_head_knockout(&m, &s, 3).unwrap();
    assert_eq!(ko.prob_normal, rows[0].prob);
    let direct = head_direct_logits(&m, &s, 3).unwrap();
    assert_eq!(direct.len(), 6);
    assert!(direct.iter().all(|(_, v)| *v <= ko.direct_logit));
}
