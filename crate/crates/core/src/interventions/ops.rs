use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::interventions::{InterventionSpec, RoutingMode};
use crate::model::{forward_batch, lm_forward, log_softmax_rows, Components, ForwardTrace, RoutedLm};
use crate::numerics::{Scalar, Tensor};
use crate::training::Corpus;

/// Logits and trace of one intervened forward pass.
pub fn forward_with_interventions<T: Scalar>(
    model: &RoutedLm<T>,
    tokens: &[u32],
    spec: &InterventionSpec,
) -> Result<(Tensor<T>, ForwardTrace<T>)> {
    let (logits, trace) = lm_forward(model, tokens, Some(spec), true)?;
    Ok((logits, trace.expect("trace requested")))
}

/// Sequences used for corpus-level evaluation: every document cut into
/// chunks of at most `max_len` tokens, keeping chunks with at least one
/// prediction.
pub fn eval_sequences(corpus: &Corpus, max_len: usize) -> Vec<Vec<u32>> {
    corpus
        .chunked(max_len)
        .into_iter()
        .map(|d| d.tokens)
        .filter(|t| t.len() >= 2)
        .collect()
}

/// Total next-token negative log-likelihood and prediction count.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct NllSum {
    pub nll: f64,
    pub count: usize,
}

impl NllSum {
    pub fn mean(&self) -> f64 {
        self.nll / self.count as f64
    }

    pub fn ppl(&self) -> f64 {
        self.mean().exp()
    }

    pub fn add(&mut self, other: NllSum) {
        self.nll += other.nll;
        self.count += other.count;
    }
}

/// Groups sequences by length so each group runs as one batch, preserving
/// the original index of every sequence.
pub(crate) fn by_length(seqs: &[Vec<u32>], max_batch: usize) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in seqs.iter().enumerate() {
        groups.entry(s.len()).or_default().push(i);
    }
    groups
        .into_values()
        .flat_map(|idx| idx.chunks(max_batch.max(1)).map(|c| c.to_vec()).collect::<Vec<_>>())
        .collect()
}

const EVAL_BATCH: usize = 16;

/// Per-sequence log-probabilities of each actual next token.
pub fn token_log_probs<T: Scalar>(
    model: &RoutedLm<T>,
    seqs: &[Vec<u32>],
    spec: Option<&InterventionSpec>,
) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![Vec::new(); seqs.len()];
    for group in by_length(seqs, EVAL_BATCH) {
        let batch: Vec<&[u32]> = group.iter().map(|&i| &seqs[i][..]).collect();
        let res = forward_batch(model, &batch, spec, &Components::default(), false)?;
        for (&i, logits) in group.iter().zip(&res.logits) {
            let lp = log_softmax_rows(logits);
            out[i] = seqs[i][1..].iter().zip(&lp).map(|(&t, row)| row[t as usize]).collect();
        }
    }
    Ok(out)
}

pub fn corpus_nll<T: Scalar>(model: &RoutedLm<T>, seqs: &[Vec<u32>], spec: Option<&InterventionSpec>) -> Result<NllSum> {
    let mut total = NllSum::default();
    for lp in token_log_probs(model, seqs, spec)? {
        total.add(NllSum {
            nll: -lp.iter().sum::<f64>(),
            count: lp.len(),
        });
    }
    if total.count == 0 {
        return Err(Error::EmptyInput("evaluation corpus"));
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSweepRow {
    pub layer: usize,
    pub ppl: f64,
    pub delta_ppl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSweep {
    pub baseline_ppl: f64,
    pub rows: Vec<LayerSweepRow>,
}

/// Perplexity with routing switched off in one layer at a time.
pub fn layer_knockout_sweep<T: Scalar>(model: &RoutedLm<T>, seqs: &[Vec<u32>]) -> Result<LayerSweep> {
    if !model.config.routing_active() {
        return Err(Error::Spec("layer sweep needs a routed model".into()));
    }
    let baseline_ppl = corpus_nll(model, seqs, None)?.ppl();
    let mut rows = Vec::with_capacity(model.config.n_layers);
    for layer in 0..model.config.n_layers {
        let spec = InterventionSpec::new().with_mode(layer, RoutingMode::Off);
        let ppl = corpus_nll(model, seqs, Some(&spec))?.ppl();
        rows.push(LayerSweepRow {
            layer,
            ppl,
            delta_ppl: ppl - baseline_ppl,
        });
    }
    Ok(LayerSweep { baseline_ppl, rows })
}

/// Learned routing of a sequence as supplied-mode matrices, one per layer.
pub fn learned_routing<T: Scalar>(model: &RoutedLm<T>, tokens: &[u32]) -> Result<Vec<Vec<Vec<f64>>>> {
    let (_, trace) = lm_forward(model, tokens, None, true)?;
    let decision = trace
        .expect("trace requested")
        .routing_decision()
        .ok_or_else(|| Error::Spec("model has no routing".into()))?;
    Ok(decision
        .layers
        .iter()
        .map(|r| (0..r.rows()).map(|h| r.row(h).iter().map(|x| x.as_f64()).collect()).collect())
        .collect())
}

fn seq_loss<T: Scalar>(model: &RoutedLm<T>, tokens: &[u32], spec: Option<&InterventionSpec>) -> Result<f64> {
    Ok(corpus_nll(model, &[tokens.to_vec()], spec)?.mean())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SwapResult {
    pub loss_a: f64,
    pub loss_b: f64,
    pub delta_a: f64,
    pub delta_b: f64,
}

/// Re-runs each sequence with the other's learned routing on `layers`.
pub fn routing_swap<T: Scalar>(model: &RoutedLm<T>, seq_a: &[u32], seq_b: &[u32], layers: &[usize]) -> Result<SwapResult> {
    if seq_a.len() < 2 || seq_b.len() < 2 {
        return Err(Error::Input("routing swap needs sequences of at least 2 tokens".into()));
    }
    let ra = learned_routing(model, seq_a)?;
    let rb = learned_routing(model, seq_b)?;
    let swapped = |other: &[Vec<Vec<f64>>]| -> Result<InterventionSpec> {
        let mut spec = InterventionSpec::new();
        for &l in layers {
            let r = other
                .get(l)
                .ok_or_else(|| Error::Spec(format!("swap layer {l} out of range")))?;
            spec = spec.with_mode(l, RoutingMode::Supplied(r.clone()));
        }
        Ok(spec)
    };
    let loss_a = seq_loss(model, seq_a, None)?;
    let loss_b = seq_loss(model, seq_b, None)?;
    let swap_a = seq_loss(model, seq_a, Some(&swapped(&rb)?))?;
    let swap_b = seq_loss(model, seq_b, Some(&swapped(&ra)?))?;
    Ok(SwapResult {
        loss_a,
        loss_b,
        delta_a: swap_a - loss_a,
        delta_b: swap_b - loss_b,
    })
}

/// One routing slot `(layer, head, k)`.
pub type DirectionRef = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryOverride {
    pub directions: usize,
    /// Mean next-token probability mass on the category's tokens.
    pub p_normal: f64,
    pub p_override: f64,
    pub delta: f64,
}

/// Forces every routing slot in `directions` to `mode` (a uniform mode, or
/// `Learned` for each sequence's own learned value) and measures the change
/// in next-token probability mass on `category_tokens`, averaged over all
/// positions.
pub fn category_override<T: Scalar>(
    model: &RoutedLm<T>,
    seqs: &[Vec<u32>],
    directions: &[DirectionRef],
    category_tokens: &[u32],
    mode: &RoutingMode,
) -> Result<CategoryOverride> {
    if directions.is_empty() {
        return Err(Error::Spec("category has no directions".into()));
    }
    if category_tokens.is_empty() {
        return Err(Error::Spec("category has no tokens".into()));
    }
    let value = match mode {
        RoutingMode::Learned => None,
        RoutingMode::Supplied(_) => return Err(Error::Spec("category override needs a uniform mode".into())),
        m => Some(m.uniform_value().expect("uniform mode")),
    };
    let mass = |logits: &Tensor<T>| -> f64 {
        log_softmax_rows(logits)
            .iter()
            .map(|row| category_tokens.iter().map(|&t| row[t as usize].exp()).sum::<f64>())
            .sum()
    };
    let (mut normal, mut forced, mut count) = (0.0, 0.0, 0usize);
    for s in seqs {
        let learned = if value.is_none() { Some(learned_routing(model, s)?) } else { None };
        let mut spec = InterventionSpec::new();
        for &(l, h, k) in directions {
            let v = match (&learned, value) {
                (Some(r), _) => r[l][h][k],
                (None, Some(v)) => v,
                (None, None) => unreachable!(),
            };
            spec = spec.with_override(l, h, k, v);
        }
        let (base, _) = lm_forward(model, s, None, false)?;
        let (over, _) = lm_forward(model, s, Some(&spec), false)?;
        normal += mass(&base);
        forced += mass(&over);
        count += s.len();
    }
    if count == 0 {
        return Err(Error::EmptyInput("category override corpus"));
    }
    let (p_normal, p_override) = (normal / count as f64, forced / count as f64);
    Ok(CategoryOverride {
        directions: directions.len(),
        p_normal,
        p_override,
        delta: p_override - p_normal,
    })
}
