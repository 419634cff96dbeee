use serde::Serialize;

use crate::error::{Error, Result};
use crate::interventions::{HeadRef, InterventionSpec, RoutingMode};
use crate::model::{lm_forward, log_softmax_rows, RoutedLm};
use crate::numerics::Scalar;

use super::evaluation::argmax;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRow {
    pub condition: String,
    pub prob: f64,
    pub logit: f64,
    pub top_token: u32,
}

fn probe_row<T: Scalar>(
    model: &RoutedLm<T>,
    tokens: &[u32],
    target: u32,
    condition: &str,
    spec: Option<&InterventionSpec>,
) -> Result<ProbeRow> {
    let (logits, _) = lm_forward(model, tokens, spec, false)?;
    let last = logits.rows() - 1;
    let lp = log_softmax_rows(&logits);
    Ok(ProbeRow {
        condition: condition.to_string(),
        prob: lp[last][target as usize].exp(),
        logit: logits.at2(last, target as usize).as_f64(),
        top_token: argmax(logits.row(last)) as u32,
    })
}

/// Target probability, logit and top prediction at the final position
/// under learned, off, neutral and full routing on every layer.
pub fn routing_conditions<T: Scalar>(model: &RoutedLm<T>, tokens: &[u32], target: u32) -> Result<Vec<ProbeRow>> {
    if target as usize >= model.config.vocab_size {
        return Err(Error::Input(format!("target {target} outside vocabulary")));
    }
    let l = model.config.n_layers;
    let mut rows = vec![probe_row(model, tokens, target, "normal", None)?];
    for (name, mode) in [("off", RoutingMode::Off), ("neutral", RoutingMode::Neutral), ("full", RoutingMode::Full)] {
        let spec = InterventionSpec::all_layers(l, mode);
        rows.push(probe_row(model, tokens, target, name, Some(&spec))?);
    }
    Ok(rows)
}

/// Direct logit contribution of each head's suppressed output to `target` at
/// the final position, through the output projection and the LM head
/// (final norm bypassed).
pub fn head_direct_logits<T: Scalar>(model: &RoutedLm<T>, tokens: &[u32], target: u32) -> Result<Vec<(HeadRef, f64)>> {
    if target as usize >= model.config.vocab_size {
        return Err(Error::Input(format!("target {target} outside vocabulary")));
    }
    let (h, dh, d) = (model.config.n_heads, model.config.d_head, model.config.d_model);
    let (_, trace) = lm_forward(model, tokens, None, true)?;
    let trace = trace.expect("trace requested");
    let emb = model.tok_emb.row(target as usize);
    let mut out = Vec::new();
    for (l, (lt, b)) in trace.layers.iter().zip(&model.blocks).enumerate() {
        let o = lt.head_suppressed.row(tokens.len() - 1);
        for hi in 0..h {
            let mut contrib = 0.0;
            for c in 0..d {
                let mut v = 0.0;
                for j in hi * dh..(hi + 1) * dh {
                    v += o[j].as_f64() * b.wo.at2(j, c).as_f64();
                }
                contrib += v * emb[c].as_f64();
            }
            out.push((HeadRef { layer: l, head: hi }, contrib));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MoverKnockout {
    pub mover: HeadRef,
    pub direct_logit: f64,
    pub prob_normal: f64,
    pub prob_knockout: f64,
    /// `prob_knockout / prob_normal`.
    pub ratio: f64,
}

/// Knocks out the head with the largest direct logit toward `target`.
pub fn mover_head_knockout<T: Scalar>(model: &RoutedLm<T>, tokens: &[u32], target: u32) -> Result<MoverKnockout> {
    let (mover, direct_logit) = head_direct_logits(model, tokens, target)?
        .into_iter()
        .reduce(|a, b| if b.1 > a.1 { b } else { a })
        .ok_or(Error::EmptyInput("model heads"))?;
    let normal = probe_row(model, tokens, target, "normal", None)?;
    let spec = InterventionSpec::new().with_knockout(mover.layer, mover.head);
    let ko = probe_row(model, tokens, target, "mover_ko", Some(&spec))?;
    Ok(MoverKnockout {
        mover,
        direct_logit,
        prob_normal: normal.prob,
        prob_knockout: ko.prob,
        ratio: ko.prob / normal.prob,
    })
}
