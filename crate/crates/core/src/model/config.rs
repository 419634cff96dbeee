use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and routing hyperparameters of a [`RoutedLm`](super::RoutedLm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    /// Suppression directions per head (`K`).
    pub n_directions: usize,
    /// Router temperature `T`.
    pub temperature: f64,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    pub router_hidden: usize,
    pub routing_enabled: bool,
}

fn default_ffn_mult() -> usize {
    4
}

/// Normalization epsilon for every LayerNorm in the model.
pub const NORM_EPS: f64 = 1e-5;
/// Guard for direction normalization.
pub const DIRECTION_EPS: f64 = 1e-8;
pub const ROPE_BASE: f64 = 10_000.0;
/// Number of linear layers in each router MLP.
pub const ROUTER_DEPTH: usize = 4;

impl ModelConfig {
    /// 12 layers × 12 heads, d_model 1536, K = 4, GPT-2 vocabulary.
    pub fn paper() -> Self {
        Self {
            n_layers: 12,
            n_heads: 12,
            d_model: 1536,
            d_head: 128,
            n_directions: 4,
            temperature: 5.0,
            vocab_size: 50_257,
            max_seq_len: 1024,
            ffn_mult: 4,
            router_hidden: 512,
            routing_enabled: true,
        }
    }

    /// Desk-scale byte-level model.
    pub fn toy() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_head: 32,
            n_directions: 4,
            temperature: 5.0,
            vocab_size: 256,
            max_seq_len: 256,
            ffn_mult: 4,
            router_hidden: 64,
            routing_enabled: true,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::config("preset", format!("unknown preset `{other}` (expected toy or paper)"))),
        }
    }

    /// The same architecture with routing removed (`K = 0`).
    pub fn baseline(&self) -> Self {
        Self {
            n_directions: 0,
            routing_enabled: false,
            ..self.clone()
        }
    }

    /// Whether the model carries direction banks and routers.
    pub fn routing_active(&self) -> bool {
        self.routing_enabled && self.n_directions > 0
    }

    pub fn d_ffn(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    /// Router output width `H·K`.
    pub fn routing_width(&self) -> usize {
        self.n_heads * self.n_directions
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("ffn_mult", self.ffn_mult),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::config(
                "d_model",
                format!("must equal n_heads * d_head = {}", self.n_heads * self.d_head),
            ));
        }
        if self.d_head % 2 != 0 {
            return Err(Error::config("d_head", "must be even for rotary positions"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature", "must be a positive finite number"));
        }
        if self.routing_active() && self.router_hidden == 0 {
            return Err(Error::config("router_hidden", "must be positive when routing is enabled"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::paper().validate().unwrap();
        ModelConfig::toy().validate().unwrap();
        ModelConfig::toy().baseline().validate().unwrap();
    }

    #[test]
    fn head_split_must_match() {
        let cfg = ModelConfig {
            d_model: 100,
            ..ModelConfig::toy()
        };
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "d_model"),
            other => panic!("{other:?}"),
        }
        let cfg = ModelConfig {
            temperature: 0.0,
            ..ModelConfig::toy()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        let mut v = serde_json::to_value(ModelConfig::toy()).unwrap();
        v["n_layerz"] = 3.into();
        assert!(serde_json::from_value::<ModelConfig>(v).is_err());
    }
}
