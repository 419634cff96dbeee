use serde::Serialize;

use crate::model::config::{ModelConfig, ROUTER_DEPTH};

/// Closed-form parameter counts per component class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub embeddings: u64,
    pub attention: u64,
    pub ffn: u64,
    pub layer_norm: u64,
    pub router: u64,
    pub directions: u64,
    pub total: u64,
}

impl ParamCounts {
    /// Router plus directions.
    pub fn routing(&self) -> u64 {
        self.router + self.directions
    }

    pub fn rows(&self) -> [(&'static str, u64); 7] {
        [
            ("embeddings", self.embeddings),
            ("attention", self.attention),
            ("ffn", self.ffn),
            ("layer_norm", self.layer_norm),
            ("router", self.router),
            ("directions", self.directions),
            ("total", self.total),
        ]
    }
}

/// Router parameters of one layer.
pub fn router_params_per_layer(config: &ModelConfig) -> u64 {
    if !config.routing_active() {
        return 0;
    }
    let d = config.d_model as u64;
    let h = config.router_hidden as u64;
    let out = config.routing_width() as u64;
    let widths = [d, h, h, h, out];
    debug_assert_eq!(widths.len(), ROUTER_DEPTH + 1);
    2 * d + widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<u64>()
}

pub fn count_params(config: &ModelConfig) -> ParamCounts {
    let l = config.n_layers as u64;
    let d = config.d_model as u64;
    let embeddings = config.vocab_size as u64 * d;
    let attention = 4 * d * d * l;
    let ffn = 2 * d * config.d_ffn() as u64 * l;
    let layer_norm = (2 * l + 1) * d;
    let router = router_params_per_layer(config) * l;
    let directions = if config.routing_active() {
        l * config.routing_width() as u64 * config.d_head as u64
    } else {
        0
    };
    ParamCounts {
        embeddings,
        attention,
        ffn,
        layer_norm,
        router,
        directions,
        total: embeddings + attention + ffn + layer_norm + router + directions,
    }
}

/// Forward-pass FLOPs for one sequence of length `n` (2 per multiply-add).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlopCounts {
    pub seq_len: u64,
    pub attention_proj: u64,
    pub attention_scores: u64,
    pub ffn: u64,
    pub lm_head: u64,
    pub router: u64,
    pub suppression: u64,
}

impl FlopCounts {
    pub fn non_routing(&self) -> u64 {
        self.attention_proj + self.attention_scores + self.ffn + self.lm_head
    }

    pub fn routing(&self) -> u64 {
        self.router + self.suppression
    }

    pub fn total(&self) -> u64 {
        self.non_routing() + self.routing()
    }

    /// Routing FLOPs over non-routing FLOPs; 0 for an empty sequence.
    pub fn overhead_ratio(&self) -> f64 {
        let base = self.non_routing();
        if base == 0 {
            0.0
        } else {
            self.routing() as f64 / base as f64
        }
    }
}

pub fn count_flops(config: &ModelConfig, seq_len: usize) -> FlopCounts {
    let n = seq_len as u64;
    let l = config.n_layers as u64;
    let d = config.d_model as u64;
    let d_ffn = config.d_ffn() as u64;
    let routed = config.routing_active() && n > 0;
    FlopCounts {
        seq_len: n,
        attention_proj: 8 * n * d * d * l,
        attention_scores: 4 * n * n * d * l,
        ffn: 4 * n * d * d_ffn * l,
        lm_head: 2 * n * config.vocab_size as u64 * d,
        router: if routed { 2 * router_params_per_layer(config) * l } else { 0 },
        suppression: if routed {
            6 * config.n_directions as u64 * config.d_head as u64 * n * config.n_heads as u64 * l
        } else {
            0
        },
    }
}
