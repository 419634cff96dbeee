use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::interventions::HeadRef;
use crate::model::{routing_decision, RoutedLm};
use crate::numerics::{Rng, Scalar};
use crate::training::Corpus;

pub const HISTOGRAM_BINS: usize = 20;

/// Population variance by the two-pass formula.
pub fn population_variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// Population variance by Welford's streaming update.
pub fn welford_variance(xs: &[f64]) -> f64 {
    let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
    for &x in xs {
        n += 1.0;
        let d = x - mean;
        mean += d / n;
        m2 += d * (x - mean);
    }
    if n == 0.0 {
        0.0
    } else {
        m2 / n
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadStats {
    pub layer: usize,
    pub head: usize,
    /// Mean routing weight per domain, in `RoutingStats::domains` order.
    pub domain_means: Vec<f64>,
    pub variance: f64,
    pub specialist: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerStats {
    pub layer: usize,
    /// Counts over `HISTOGRAM_BINS` equal bins of [0, 1].
    pub histogram: Vec<usize>,
    pub mean: f64,
    pub std: f64,
    pub max: f64,
    pub mean_head_variance: f64,
    pub specialists: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingStats {
    pub domains: Vec<String>,
    pub heads: Vec<HeadStats>,
    pub layers: Vec<LayerStats>,
    pub specialist_threshold: f64,
}

pub fn histogram(values: &[f64], bins: usize) -> Vec<usize> {
    let mut h = vec![0; bins];
    for &v in values {
        let b = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        h[b] += 1;
    }
    h
}

/// Flags heads whose variance reaches the top-quartile boundary over all
/// heads; heads tied with the boundary value are included.
pub fn specialist_flags(variances: &[f64]) -> (Vec<bool>, f64) {
    if variances.is_empty() {
        return (Vec::new(), 0.0);
    }
    let mut sorted = variances.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let q = variances.len().div_ceil(4);
    let threshold = sorted[q - 1];
    (variances.iter().map(|&v| v >= threshold).collect(), threshold)
}

/// Statistics from per-head domain means (`means[l·H + h][domain]`) and the
/// raw weights seen in each layer.
pub fn stats_from_means(
    n_heads: usize,
    domains: Vec<String>,
    means: &[Vec<f64>],
    layer_weights: &[Vec<f64>],
) -> Result<RoutingStats> {
    if domains.len() < 2 {
        return Err(Error::Input("routing variance needs at least two domains".into()));
    }
    if n_heads == 0 || means.len() != layer_weights.len() * n_heads {
        return Err(Error::Contract("head means do not match the layer count".into()));
    }
    let variances: Vec<f64> = means.iter().map(|m| population_variance(m)).collect();
    let (flags, threshold) = specialist_flags(&variances);
    let heads: Vec<HeadStats> = means
        .iter()
        .enumerate()
        .map(|(i, m)| HeadStats {
            layer: i / n_heads,
            head: i % n_heads,
            domain_means: m.clone(),
            variance: variances[i],
            specialist: flags[i],
        })
        .collect();
    let layers = layer_weights
        .iter()
        .enumerate()
        .map(|(l, w)| {
            let span = l * n_heads..(l + 1) * n_heads;
            let n = w.len().max(1) as f64;
            LayerStats {
                layer: l,
                histogram: histogram(w, HISTOGRAM_BINS),
                mean: w.iter().sum::<f64>() / n,
                std: population_variance(w).sqrt(),
                max: w.iter().copied().fold(0.0, f64::max),
                mean_head_variance: variances[span.clone()].iter().sum::<f64>() / n_heads as f64,
                specialists: flags[span].iter().filter(|&&f| f).count(),
            }
        })
        .collect();
    Ok(RoutingStats {
        domains,
        heads,
        layers,
        specialist_threshold: threshold,
    })
}

/// Learned routing statistics over a domain-tagged corpus. Each document is
/// cut to the model's context and routed as one sequence.
pub fn routing_stats<T: Scalar>(model: &RoutedLm<T>, corpus: &Corpus) -> Result<RoutingStats> {
    let c = &model.config;
    if !c.routing_active() {
        return Err(Error::Spec("routing statistics need a routed model".into()));
    }
    let (l, h, k) = (c.n_layers, c.n_heads, c.n_directions);
    let mut per_domain: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    let mut order = Vec::new();
    let mut layer_weights = vec![Vec::new(); l];
    for doc in corpus.chunked(c.max_seq_len) {
        if doc.tokens.is_empty() {
            continue;
        }
        let name = doc.label.clone().unwrap_or_else(|| "text".into());
        let dec = routing_decision(model, &doc.tokens)?.ok_or(Error::Spec("model has no routing".into()))?;
        let entry = per_domain.entry(name.clone()).or_insert_with(|| {
            order.push(name);
            (vec![0.0; l * h], 0)
        });
        for (li, r) in dec.layers.iter().enumerate() {
            for hi in 0..h {
                let row = r.row(hi);
                entry.0[li * h + hi] += row.iter().map(|x| x.as_f64()).sum::<f64>() / k as f64;
                layer_weights[li].extend(row.iter().map(|x| x.as_f64()));
            }
        }
        entry.1 += 1;
    }
    let means: Vec<Vec<f64>> = (0..l * h)
        .map(|i| {
            order
                .iter()
                .map(|d| {
                    let (sums, n) = &per_domain[d];
                    sums[i] / *n as f64
                })
                .collect()
        })
        .collect();
    stats_from_means(h, order, &means, &layer_weights)
}

pub fn routing_specialists(stats: &RoutingStats) -> Vec<HeadRef> {
    stats
        .heads
        .iter()
        .filter(|s| s.specialist)
        .map(|s| HeadRef {
            layer: s.layer,
            head: s.head,
        })
        .collect()
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fingerprint {
    pub classes: Vec<String>,
    /// `confusion[true][predicted]`, over classes with ≥2 sequences.
    pub confusion: Vec<Vec<usize>>,
    pub evaluated: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub excluded: Vec<String>,
    /// Top-2 principal coordinates of every input vector.
    pub pca: Vec<[f64; 2]>,
    pub explained_variance: [f64; 2],
    /// Pairwise L2 between class centroids over all sequences.
    pub centroid_distances: Vec<Vec<f64>>,
}

fn centroid<'a>(vs: impl Iterator<Item = &'a Vec<f64>>, dim: usize) -> Vec<f64> {
    let mut c = vec![0.0; dim];
    let mut n = 0.0;
    for v in vs {
        for (a, b) in c.iter_mut().zip(v) {
            *a += b;
        }
        n += 1.0;
    }
    c.iter_mut().for_each(|a| *a /= n);
    c
}

/// Top-2 principal projections. Each component's sign is fixed so its
/// largest-magnitude loading is positive.
pub fn pca2(vectors: &[Vec<f64>]) -> ([f64; 2], Vec<[f64; 2]>) {
    let n = vectors.len();
    let dim = vectors.first().map_or(0, Vec::len);
    if n == 0 || dim == 0 {
        return ([0.0; 2], vec![[0.0; 2]; n]);
    }
    let mean = centroid(vectors.iter(), dim);
    let x = DMatrix::from_fn(n, dim, |i, j| vectors[i][j] - mean[j]);
    let cov = x.transpose() * &x / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut comps = Vec::new();
    let mut explained = [0.0; 2];
    for (slot, &c) in order.iter().take(2).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0, |m: f64, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        explained[slot] = eig.eigenvalues[c].max(0.0);
        comps.push(v);
    }
    let coords = (0..n)
        .map(|i| {
            let mut p = [0.0; 2];
            for (slot, v) in comps.iter().enumerate() {
                p[slot] = (0..dim).map(|j| x[(i, j)] * v[j]).sum();
            }
            p
        })
        .collect();
    (explained, coords)
}

/// Leave-one-out nearest-centroid classification of labeled vectors.
/// Classes keep first-appearance order; distance ties go to the earlier class.
pub fn classify_vectors(labels: &[String], vectors: &[Vec<f64>]) -> Result<Fingerprint> {
    if labels.len() != vectors.len() || vectors.is_empty() {
        return Err(Error::Input("need one label per routing vector".into()));
    }
    let dim = vectors[0].len();
    let mut classes: Vec<String> = Vec::new();
    for l in labels {
        if !classes.contains(l) {
            classes.push(l.clone());
        }
    }
    let members: Vec<Vec<usize>> = classes
        .iter()
        .map(|c| (0..labels.len()).filter(|&i| &labels[i] == c).collect())
        .collect();
    let mut excluded = Vec::new();
    let eligible: Vec<usize> = (0..classes.len())
        .filter(|&c| {
            if members[c].len() < 2 {
                warn!("class `{}` has a single sequence; left out of leave-one-out", classes[c]);
                excluded.push(classes[c].clone());
                false
            } else {
                true
            }
        })
        .collect();
    let mut confusion = vec![vec![0; classes.len()]; classes.len()];
    let (mut evaluated, mut correct) = (0, 0);
    for &c in &eligible {
        for &i in &members[c] {
            let mut best: Option<(usize, f64)> = None;
            for &o in &eligible {
                let cen = centroid(members[o].iter().filter(|&&j| j != i).map(|&j| &vectors[j]), dim);
                let d = l2(&vectors[i], &cen);
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((o, d));
                }
            }
            let pred = best.expect("eligible classes").0;
            confusion[c][pred] += 1;
            evaluated += 1;
            correct += usize::from(pred == c);
        }
    }
    let centroids: Vec<Vec<f64>> = members
        .iter()
        .map(|m| centroid(m.iter().map(|&j| &vectors[j]), dim))
        .collect();
    let centroid_distances = centroids
        .iter()
        .map(|a| centroids.iter().map(|b| l2(a, b)).collect())
        .collect();
    let (explained_variance, pca) = pca2(vectors);
    Ok(Fingerprint {
        classes,
        confusion,
        evaluated,
        correct,
        accuracy: if evaluated == 0 { 0.0 } else { correct as f64 / evaluated as f64 },
        excluded,
        pca,
        explained_variance,
        centroid_distances,
    })
}

/// Classifies labeled sequences by their flattened learned routing.
pub fn fingerprint_classify<T: Scalar>(model: &RoutedLm<T>, labeled: &[(String, Vec<u32>)]) -> Result<Fingerprint> {
    let mut labels = Vec::with_capacity(labeled.len());
    let mut vectors = Vec::with_capacity(labeled.len());
    for (label, seq) in labeled {
        let dec = routing_decision(model, seq)?.ok_or(Error::Spec("model has no routing".into()))?;
        labels.push(label.clone());
        vectors.push(dec.flatten());
    }
    classify_vectors(&labels, &vectors)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sensitivity {
    pub sequences: usize,
    pub swap: f64,
    pub replace: f64,
    pub swap_per_layer: Vec<f64>,
    pub replace_per_layer: Vec<f64>,
}

fn layer_shifts<T: Scalar>(model: &RoutedLm<T>, base: &[Vec<f64>], tokens: &[u32]) -> Result<(f64, Vec<f64>)> {
    let dec = routing_decision(model, tokens)?.ok_or(Error::Spec("model has no routing".into()))?;
    let mut total = 0.0;
    let per = dec
        .layers
        .iter()
        .zip(base)
        .map(|(r, b)| {
            let sq: f64 = r.data().iter().zip(b).map(|(x, y)| (x.as_f64() - y).powi(2)).sum();
            total += sq;
            sq.sqrt()
        })
        .collect();
    Ok((total.sqrt(), per))
}

/// Mean L2 routing shift from swapping two random positions versus
/// replacing one position with a random token.
pub fn token_sensitivity<T: Scalar>(model: &RoutedLm<T>, seqs: &[Vec<u32>], rng: &mut Rng) -> Result<Sensitivity> {
    let l = model.config.n_layers;
    let mut out = Sensitivity {
        sequences: 0,
        swap: 0.0,
        replace: 0.0,
        swap_per_layer: vec![0.0; l],
        replace_per_layer: vec![0.0; l],
    };
    for s in seqs {
        if s.len() < 2 {
            return Err(Error::Input("token sensitivity needs sequences of at least 2 tokens".into()));
        }
        let dec = routing_decision(model, s)?.ok_or(Error::Spec("model has no routing".into()))?;
        let base: Vec<Vec<f64>> = dec
            .layers
            .iter()
            .map(|r| r.data().iter().map(|x| x.as_f64()).collect())
            .collect();
        let i = rng.below(s.len());
        let j = (i + 1 + rng.below(s.len() - 1)) % s.len();
        let mut swapped = s.clone();
        swapped.swap(i, j);
        let mut replaced = s.clone();
        replaced[rng.below(s.len())] = rng.below(model.config.vocab_size) as u32;
        let (sw, swl) = layer_shifts(model, &base, &swapped)?;
        let (rp, rpl) = layer_shifts(model, &base, &replaced)?;
        out.swap += sw;
        out.replace += rp;
        for li in 0..l {
            out.swap_per_layer[li] += swl[li];
            out.replace_per_layer[li] += rpl[li];
        }
        out.sequences += 1;
    }
    if out.sequences == 0 {
        return Err(Error::EmptyInput("sensitivity corpus"));
    }
    let n = out.sequences as f64;
    out.swap /= n;
    out.replace /= n;
    out.swap_per_layer.iter_mut().chain(out.replace_per_layer.iter_mut()).for_each(|x| *x /= n);
    Ok(out)
}
