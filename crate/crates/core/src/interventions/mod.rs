//! Declarative interventions on routing, heads and individual directions,
//! and the causal experiments built from them.

mod ops;
mod spec;

pub use ops::{
    category_override, corpus_nll, eval_sequences, forward_with_interventions, layer_knockout_sweep, learned_routing,
    routing_swap, token_log_probs, CategoryOverride, DirectionRef, LayerSweep, LayerSweepRow, NllSum, SwapResult,
};
pub(crate) use ops::by_length;
pub use spec::{DirectionOverride, HeadRef, InterventionSpec, LayerPlan, RoutingMode, RoutingSource};

#[cfg(test)]
mod tests;
