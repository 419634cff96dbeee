use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// How a layer's routing weights are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// Router output (no intervention).
    #[default]
    Learned,
    /// `r ≡ 0`: no suppression.
    Off,
    /// `r ≡ 0.5`.
    Neutral,
    /// `r ≡ 1`: full removal along every direction.
    Full,
    /// `r ≡ w` for every head and direction.
    Fixed(f64),
    /// Explicit `H × K` matrix.
    Supplied(Vec<Vec<f64>>),
}

impl RoutingMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(RoutingMode::Learned),
            "off" => Ok(RoutingMode::Off),
            "neutral" => Ok(RoutingMode::Neutral),
            "full" => Ok(RoutingMode::Full),
            other => {
                let w = other
                    .strip_prefix("fixed:")
                    .and_then(|w| w.parse::<f64>().ok())
                    .ok_or_else(|| Error::Spec(format!("unknown routing mode `{other}`")))?;
                Ok(RoutingMode::Fixed(w))
            }
        }
    }

    /// The constant weight this mode applies, if it is uniform.
    pub fn uniform_value(&self) -> Option<f64> {
        match self {
            RoutingMode::Off => Some(0.0),
            RoutingMode::Neutral => Some(0.5),
            RoutingMode::Full => Some(1.0),
            RoutingMode::Fixed(w) => Some(*w),
            RoutingMode::Learned | RoutingMode::Supplied(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadRef {
    pub layer: usize,
    pub head: usize,
}

/// Forces one routing entry `r[layer][head][k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionOverride {
    pub layer: usize,
    pub head: usize,
    pub k: usize,
    pub value: f64,
}

/// Declarative overrides applied during a forward pass. The empty spec is
/// the unmodified model.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionSpec {
    /// Per-layer routing mode; absent layers use the learned router.
    #[serde(default)]
    pub routing: BTreeMap<usize, RoutingMode>,
    /// Heads whose post-suppression output is zeroed.
    #[serde(default)]
    pub head_knockouts: BTreeSet<HeadRef>,
    /// Applied after the layer's mode, so they always win.
    #[serde(default)]
    pub direction_overrides: Vec<DirectionOverride>,
}

/// Where one layer's routing weights come from after resolving a spec.
#[derive(Debug, Clone, PartialEq)]
pub enum RoutingSource {
    Learned,
    Constant(f64),
    /// Row-major `H·K` entries shared by every sequence in the batch.
    Matrix(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerPlan {
    pub routing: RoutingSource,
    /// `(h·K + k, value)` pairs.
    pub overrides: Vec<(usize, f64)>,
    pub knockouts: Vec<usize>,
}

impl LayerPlan {
    pub fn learned() -> Self {
        Self {
            routing: RoutingSource::Learned,
            overrides: Vec::new(),
            knockouts: Vec::new(),
        }
    }
}

fn unit_interval(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

impl InterventionSpec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.routing.values().all(|m| *m == RoutingMode::Learned)
            && self.head_knockouts.is_empty()
            && self.direction_overrides.is_empty()
    }

    pub fn all_layers(n_layers: usize, mode: RoutingMode) -> Self {
        let mut spec = Self::default();
        for l in 0..n_layers {
            spec.routing.insert(l, mode.clone());
        }
        spec
    }

    pub fn with_mode(mut self, layer: usize, mode: RoutingMode) -> Self {
        self.routing.insert(layer, mode);
        self
    }

    pub fn with_knockout(mut self, layer: usize, head: usize) -> Self {
        self.head_knockouts.insert(HeadRef { layer, head });
        self
    }

    pub fn with_override(mut self, layer: usize, head: usize, k: usize, value: f64) -> Self {
        self.direction_overrides.push(DirectionOverride { layer, head, k, value });
        self
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let (l, h, k) = (config.n_layers, config.n_heads, config.n_directions);
        let routed = config.routing_active();
        for (&layer, mode) in &self.routing {
            if layer >= l {
                return Err(Error::Spec(format!("routing layer {layer} out of range (model has {l} layers)")));
            }
            match mode {
                RoutingMode::Fixed(w) if !unit_interval(*w) => {
                    return Err(Error::Spec(format!("fixed weight {w} at layer {layer} outside [0,1]")));
                }
                RoutingMode::Supplied(rows) => {
                    if rows.len() != h || rows.iter().any(|r| r.len() != k) {
                        return Err(Error::Spec(format!("supplied routing at layer {layer} must be {h}x{k}")));
                    }
                    if rows.iter().flatten().any(|&x| !unit_interval(x)) {
                        return Err(Error::Spec(format!("supplied routing at layer {layer} has entries outside [0,1]")));
                    }
                }
                _ => {}
            }
            if !routed && !matches!(mode, RoutingMode::Learned | RoutingMode::Off) {
                return Err(Error::Spec(format!("layer {layer}: model has no routing to override")));
            }
        }
        for head in &self.head_knockouts {
            if head.layer >= l || head.head >= h {
                return Err(Error::Spec(format!("knockout L{}H{} out of range", head.layer, head.head)));
            }
        }
        for o in &self.direction_overrides {
            if !routed {
                return Err(Error::Spec("direction override on a model without routing".into()));
            }
            if o.layer >= l || o.head >= h || o.k >= k {
                return Err(Error::Spec(format!("override L{}H{}K{} out of range", o.layer, o.head, o.k)));
            }
            if !unit_interval(o.value) {
                return Err(Error::Spec(format!("override value {} outside [0,1]", o.value)));
            }
        }
        Ok(())
    }

    /// Validates and lowers the spec to one plan per layer.
    pub fn plan(&self, config: &ModelConfig) -> Result<Vec<LayerPlan>> {
        self.validate(config)?;
        let k = config.n_directions;
        let mut plans: Vec<LayerPlan> = (0..config.n_layers).map(|_| LayerPlan::learned()).collect();
        for (&layer, mode) in &self.routing {
            plans[layer].routing = match mode {
                RoutingMode::Learned => RoutingSource::Learned,
                RoutingMode::Supplied(rows) => RoutingSource::Matrix(rows.iter().flatten().copied().collect()),
                m => RoutingSource::Constant(m.uniform_value().expect("uniform mode")),
            };
        }
        for o in &self.direction_overrides {
            let idx = o.head * k + o.k;
            let list = &mut plans[o.layer].overrides;
            list.retain(|(i, _)| *i != idx);
            list.push((idx, o.value));
        }
        for head in &self.head_knockouts {
            plans[head.layer].knockouts.push(head.head);
        }
        Ok(plans)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(s);
        Ok(Self::deserialize(de)?)
    }
}
