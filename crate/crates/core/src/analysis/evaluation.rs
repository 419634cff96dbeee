use std::collections::BTreeMap;

use log::warn;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::interventions::{by_length, corpus_nll, token_log_probs, HeadRef, InterventionSpec, RoutingMode};
use crate::model::{forward_batch, log_softmax_rows, Components, RoutedLm};
use crate::numerics::Scalar;
use crate::training::{Corpus, Document};

const BATCH: usize = 16;

/// Index of the largest value; ties go to the smallest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn require_queries(corpus: &Corpus) -> Result<()> {
    if corpus.num_queries() == 0 {
        return Err(Error::Input("corpus has no query positions".into()));
    }
    Ok(())
}

/// Fraction of queries where `predict(tokens, position)` returns the answer.
pub fn induction_accuracy_with(corpus: &Corpus, mut predict: impl FnMut(&[u32], usize) -> u32) -> Result<f64> {
    require_queries(corpus)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for d in &corpus.docs {
        for q in &d.queries {
            hit += usize::from(predict(&d.tokens, q.position) == q.answer);
            total += 1;
        }
    }
    Ok(hit as f64 / total as f64)
}

/// Greedy next-token accuracy of the model on every query position.
pub fn induction_accuracy<T: Scalar>(
    model: &RoutedLm<T>,
    corpus: &Corpus,
    spec: Option<&InterventionSpec>,
) -> Result<f64> {
    require_queries(corpus)?;
    let seqs: Vec<Vec<u32>> = corpus.docs.iter().map(|d| d.tokens.clone()).collect();
    let (mut hit, mut total) = (0usize, 0usize);
    for group in by_length(&seqs, BATCH) {
        let batch: Vec<&[u32]> = group.iter().map(|&i| &seqs[i][..]).collect();
        let out = forward_batch(model, &batch, spec, &Components::default(), false)?;
        for (&i, logits) in group.iter().zip(&out.logits) {
            for q in &corpus.docs[i].queries {
                hit += usize::from(argmax(logits.row(q.position)) as u32 == q.answer);
                total += 1;
            }
        }
    }
    Ok(hit as f64 / total as f64)
}

/// Mean attention from each query position to the token right after the
/// previous occurrence of the query token, per (layer, head).
pub fn induction_head_scores<T: Scalar>(model: &RoutedLm<T>, corpus: &Corpus) -> Result<Vec<(HeadRef, f64)>> {
    require_queries(corpus)?;
    let (l, h) = (model.config.n_layers, model.config.n_heads);
    let mut sums = vec![0.0; l * h];
    let mut count = 0usize;
    let seqs: Vec<Vec<u32>> = corpus.docs.iter().map(|d| d.tokens.clone()).collect();
    for group in by_length(&seqs, BATCH) {
        let batch: Vec<&[u32]> = group.iter().map(|&i| &seqs[i][..]).collect();
        let out = forward_batch(model, &batch, None, &Components::default(), true)?;
        for (&i, tr) in group.iter().zip(out.traces.expect("trace requested").iter()) {
            let doc: &Document = &corpus.docs[i];
            let n = doc.tokens.len();
            for q in &doc.queries {
                let tok = doc.tokens[q.position];
                let Some(prev) = (0..q.position).rev().find(|&j| doc.tokens[j] == tok) else {
                    continue;
                };
                let src = prev + 1;
                count += 1;
                for (li, layer) in tr.layers.iter().enumerate() {
                    let a = layer.attention.data();
                    for hi in 0..h {
                        sums[li * h + hi] += a[hi * n * n + q.position * n + src].as_f64();
                    }
                }
            }
        }
    }
    let denom = count.max(1) as f64;
    Ok((0..l * h)
        .map(|i| (HeadRef { layer: i / h, head: i % h }, sums[i] / denom))
        .collect())
}

/// Heads sorted by descending score (ties by position), first `k` kept.
pub fn top_heads(scores: &[(HeadRef, f64)], k: usize) -> Vec<HeadRef> {
    let mut s = scores.to_vec();
    s.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    s.into_iter().take(k).map(|(h, _)| h).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InductionRow {
    pub condition: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InductionTable {
    pub rows: Vec<InductionRow>,
    pub knocked_out: Vec<HeadRef>,
    pub queries: usize,
}

/// Normal, all-layer routing-off and top-induction-head knockout accuracies.
pub fn induction_table<T: Scalar>(model: &RoutedLm<T>, corpus: &Corpus, n_heads: usize) -> Result<InductionTable> {
    let heads = top_heads(&induction_head_scores(model, corpus)?, n_heads);
    let mut ko = InterventionSpec::new();
    for h in &heads {
        ko = ko.with_knockout(h.layer, h.head);
    }
    let off = InterventionSpec::all_layers(model.config.n_layers, RoutingMode::Off);
    let rows = vec![
        InductionRow {
            condition: "normal".into(),
            accuracy: induction_accuracy(model, corpus, None)?,
        },
        InductionRow {
            condition: "routing_off".into(),
            accuracy: induction_accuracy(model, corpus, Some(&off))?,
        },
        InductionRow {
            condition: "induction_head_ko".into(),
            accuracy: induction_accuracy(model, corpus, Some(&ko))?,
        },
    ];
    Ok(InductionTable {
        rows,
        knocked_out: heads,
        queries: corpus.num_queries(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainPpl {
    pub domain: String,
    pub tokens: usize,
    pub ppl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainPplReport {
    pub domains: Vec<DomainPpl>,
    pub overall: f64,
}

/// Perplexity per labeled domain and token-weighted overall.
pub fn domain_perplexity<T: Scalar>(
    model: &RoutedLm<T>,
    corpus: &Corpus,
    spec: Option<&InterventionSpec>,
) -> Result<DomainPplReport> {
    let mut per: BTreeMap<String, Vec<Vec<u32>>> = BTreeMap::new();
    let mut order = Vec::new();
    for d in corpus.chunked(model.config.max_seq_len) {
        let name = d.label.clone().unwrap_or_else(|| "text".into());
        if !per.contains_key(&name) {
            order.push(name.clone());
        }
        let entry = per.entry(name).or_default();
        if d.tokens.len() >= 2 {
            entry.push(d.tokens);
        }
    }
    let mut domains = Vec::new();
    let (mut nll, mut count) = (0.0, 0usize);
    for name in order {
        let seqs = &per[&name];
        if seqs.is_empty() {
            warn!("domain `{name}` has no predictable tokens; skipped");
            continue;
        }
        let s = corpus_nll(model, seqs, spec)?;
        nll += s.nll;
        count += s.count;
        domains.push(DomainPpl {
            domain: name,
            tokens: s.count,
            ppl: s.ppl(),
        });
    }
    if count == 0 {
        return Err(Error::EmptyInput("domain corpora"));
    }
    Ok(DomainPplReport {
        domains,
        overall: (nll / count as f64).exp(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sharpness {
    pub top1: f64,
    pub entropy: f64,
    pub positions: usize,
}

/// Top-1 probability and entropy (nats) of one row of log-probabilities.
pub fn row_sharpness(log_probs: &[f64]) -> (f64, f64) {
    let top = log_probs.iter().copied().fold(f64::NEG_INFINITY, f64::max).exp();
    let entropy = -log_probs
        .iter()
        .map(|&lp| if lp == f64::NEG_INFINITY { 0.0 } else { lp.exp() * lp })
        .sum::<f64>();
    (top, entropy)
}

pub fn sharpness_stats<T: Scalar>(
    model: &RoutedLm<T>,
    seqs: &[Vec<u32>],
    spec: Option<&InterventionSpec>,
) -> Result<Sharpness> {
    let (mut top, mut ent, mut n) = (0.0, 0.0, 0usize);
    for group in by_length(seqs, BATCH) {
        let batch: Vec<&[u32]> = group.iter().map(|&i| &seqs[i][..]).collect();
        let out = forward_batch(model, &batch, spec, &Components::default(), false)?;
        for logits in &out.logits {
            for row in log_softmax_rows(logits) {
                let (t, e) = row_sharpness(&row);
                top += t;
                ent += e;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyInput("sharpness corpus"));
    }
    Ok(Sharpness {
        top1: top / n as f64,
        entropy: ent / n as f64,
        positions: n,
    })
}

/// Position buckets `[lo, hi)`; the last one is open-ended.
pub const POSITION_BUCKETS: [(usize, Option<usize>); 4] = [(0, Some(10)), (10, Some(50)), (50, Some(100)), (100, None)];

pub fn bucket_of(position: usize) -> usize {
    POSITION_BUCKETS
        .iter()
        .position(|&(lo, hi)| position >= lo && hi.is_none_or(|h| position < h))
        .expect("buckets cover every position")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositionBucket {
    pub label: String,
    pub count: usize,
    /// `None` when no prediction falls in the bucket.
    pub delta_log_prob: Option<f64>,
}

/// Mean log-prob of the next token under learned routing minus under the
/// comparison spec (routing off unless given), per position of the
/// predicting token.
pub fn position_benefit<T: Scalar>(
    model: &RoutedLm<T>,
    seqs: &[Vec<u32>],
    against: Option<&InterventionSpec>,
) -> Result<Vec<PositionBucket>> {
    let off = InterventionSpec::all_layers(model.config.n_layers, RoutingMode::Off);
    let against = against.unwrap_or(&off);
    let learned = token_log_probs(model, seqs, None)?;
    let other = token_log_probs(model, seqs, Some(against))?;
    let mut sums = [0.0; 4];
    let mut counts = [0usize; 4];
    for (a, b) in learned.iter().zip(&other) {
        for (p, (x, y)) in a.iter().zip(b).enumerate() {
            let k = bucket_of(p);
            sums[k] += x - y;
            counts[k] += 1;
        }
    }
    Ok(POSITION_BUCKETS
        .iter()
        .enumerate()
        .map(|(k, &(lo, hi))| PositionBucket {
            label: match hi {
                Some(h) => format!("{lo}-{}", h - 1),
                None => format!("{lo}+"),
            },
            count: counts[k],
            delta_log_prob: (counts[k] > 0).then(|| sums[k] / counts[k] as f64),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub w: f64,
    pub ppl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedWeightGrid {
    pub rows: Vec<GridRow>,
    pub best_w: f64,
    pub best_ppl: f64,
    pub learned_ppl: f64,
}

/// Perplexity with every layer's routing fixed to each `w`, plus learned.
pub fn fixed_weight_grid<T: Scalar>(model: &RoutedLm<T>, seqs: &[Vec<u32>], grid: &[f64]) -> Result<FixedWeightGrid> {
    if grid.is_empty() {
        return Err(Error::Spec("empty weight grid".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &w in grid {
        let spec = InterventionSpec::all_layers(model.config.n_layers, RoutingMode::Fixed(w));
        rows.push(GridRow {
            w,
            ppl: corpus_nll(model, seqs, Some(&spec))?.ppl(),
        });
    }
    let best = rows
        .iter()
        .min_by(|a, b| a.ppl.total_cmp(&b.ppl).then(a.w.total_cmp(&b.w)))
        .expect("non-empty grid");
    Ok(FixedWeightGrid {
        best_w: best.w,
        best_ppl: best.ppl,
        learned_ppl: corpus_nll(model, seqs, None)?.ppl(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdditivitySet {
    pub layers: Vec<usize>,
    pub delta_loss: f64,
    pub sum_of_singletons: f64,
    pub interaction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Additivity {
    pub base_loss: f64,
    pub singletons: Vec<f64>,
    pub sets: Vec<AdditivitySet>,
}

/// Loss increase from neutral routing on single layers and on layer sets,
/// with the interaction `Δ(set) − Σ Δ(singletons)`.
pub fn layer_additivity<T: Scalar>(
    model: &RoutedLm<T>,
    seqs: &[Vec<u32>],
    layer_sets: &[Vec<usize>],
) -> Result<Additivity> {
    let l = model.config.n_layers;
    for set in layer_sets {
        if let Some(&bad) = set.iter().find(|&&x| x >= l) {
            return Err(Error::Spec(format!("layer {bad} out of range")));
        }
    }
    let base_loss = corpus_nll(model, seqs, None)?.mean();
    let delta = |set: &[usize]| -> Result<f64> {
        if set.is_empty() {
            return Ok(0.0);
        }
        let mut spec = InterventionSpec::new();
        for &x in set {
            spec = spec.with_mode(x, RoutingMode::Neutral);
        }
        Ok(corpus_nll(model, seqs, Some(&spec))?.mean() - base_loss)
    };
    let singletons = (0..l).map(|x| delta(&[x])).collect::<Result<Vec<_>>>()?;
    let sets = layer_sets
        .iter()
        .map(|set| {
            let mut uniq = set.clone();
            uniq.sort_unstable();
            uniq.dedup();
            let d = if uniq.len() == 1 { singletons[uniq[0]] } else { delta(&uniq)? };
            let sum: f64 = uniq.iter().map(|&x| singletons[x]).sum();
            Ok(AdditivitySet {
                layers: uniq,
                delta_loss: d,
                sum_of_singletons: sum,
                interaction: d - sum,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Additivity {
        base_loss,
        singletons,
        sets,
    })
}
