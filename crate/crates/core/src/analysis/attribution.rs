use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{forward_batch, Components, RoutedLm};
use crate::numerics::Scalar;

/// Marginal Δlogit of one target token at the final position, per
/// component class. Rows are not expected to sum to the full logit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributionReport {
    pub target: u32,
    pub position: usize,
    pub full_logit: f64,
    pub embedding: f64,
    pub raw_heads: f64,
    pub routing_delta: f64,
    pub ffn: f64,
    pub note: String,
}

impl AttributionReport {
    pub fn rows(&self) -> [(&'static str, f64); 4] {
        [
            ("embedding", self.embedding),
            ("raw_heads", self.raw_heads),
            ("routing_delta", self.routing_delta),
            ("ffn", self.ffn),
        ]
    }
}

pub const ATTRIBUTION_NOTE: &str = "marginal: active minus zeroed, one component class at a time; \
non-additive through the norms; the embedding row zeroes the token embeddings";

fn final_logit<T: Scalar>(model: &RoutedLm<T>, tokens: &[u32], target: u32, comps: &Components) -> Result<f64> {
    let out = forward_batch(model, &[tokens], None, comps, false)?;
    let l = &out.logits[0];
    Ok(l.at2(l.rows() - 1, target as usize).as_f64())
}

/// Attribution relative to a base set of components (used to linearize the
/// network in oracle tests).
pub fn logit_attribution_with<T: Scalar>(
    model: &RoutedLm<T>,
    tokens: &[u32],
    target: u32,
    base: Components,
) -> Result<AttributionReport> {
    if target as usize >= model.config.vocab_size {
        return Err(Error::Input(format!("target {target} outside vocabulary")));
    }
    let full = final_logit(model, tokens, target, &base)?;
    let without = |f: fn(&mut Components)| -> Result<f64> {
        let mut c = base;
        f(&mut c);
        Ok(full - final_logit(model, tokens, target, &c)?)
    };
    Ok(AttributionReport {
        target,
        position: tokens.len() - 1,
        full_logit: full,
        embedding: without(|c| c.embedding = false)?,
        raw_heads: without(|c| c.raw_heads = false)?,
        routing_delta: without(|c| c.routing_delta = false)?,
        ffn: without(|c| c.ffn = false)?,
        note: ATTRIBUTION_NOTE.to_string(),
    })
}

pub fn logit_attribution<T: Scalar>(model: &RoutedLm<T>, tokens: &[u32], target: u32) -> Result<AttributionReport> {
    logit_attribution_with(model, tokens, target, Components::default())
}
