//! Model configuration, parameters, forward pass and cost accounting.

mod accounting;
mod config;
mod forward;
mod params;

pub use accounting::{count_flops, count_params, router_params_per_layer, FlopCounts, ParamCounts};
pub use config::{ModelConfig, DIRECTION_EPS, NORM_EPS, ROPE_BASE, ROUTER_DEPTH};
pub use forward::{
    forward_batch, forward_on_tape, lm_forward, log_softmax_rows, normalize_directions, router_forward,
    router_on_tape, routing_decision, suppress, BatchOutput, BlockVars, Components, ForwardTrace, LayerTrace,
    LayerVars, ModelVars, RouterVars, RoutingDecision, TapeForward,
};
pub use params::{Block, Dense, ParamClass, RoutedLm, RouterParams};

#[cfg(test)]
mod tests;
