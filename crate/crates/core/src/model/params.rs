use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, ROUTER_DEPTH};
use crate::numerics::{init_params, InitScheme, Rng, Scalar, Tensor};

/// Affine layer `y = x·W + b` with `W` stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Per-layer router: affine input normalization followed by a four-layer
/// MLP `d_model → hidden → hidden → hidden → H·K`.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams<T> {
    pub norm_gain: Tensor<T>,
    pub norm_bias: Tensor<T>,
    pub layers: Vec<Dense<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ffn_norm: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
    /// Raw direction bank `[H·K, d_head]`, row `h·K + k`.
    pub directions: Option<Tensor<T>>,
    pub router: Option<RouterParams<T>>,
}

/// Full parameter set. With routing disabled this is a plain pre-norm
/// causal transformer with rotary positions and a tied LM head.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutedLm<T> {
    pub config: ModelConfig,
    pub tok_emb: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: Tensor<T>,
}

/// Coarse grouping of parameters, used for weight-decay masks and
/// per-class gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamClass {
    Embedding,
    Attention,
    Ffn,
    Norm,
    Direction,
    RouterWeight,
    RouterBias,
    RouterNorm,
}

impl ParamClass {
    pub fn of(name: &str) -> ParamClass {
        let last = name.rsplit('.').next().unwrap_or(name);
        if name == "tok_emb" {
            ParamClass::Embedding
        } else if name.contains(".router.") {
            match last {
                "weight" => ParamClass::RouterWeight,
                "bias" => ParamClass::RouterBias,
                _ => ParamClass::RouterNorm,
            }
        } else {
            match last {
                "wq" | "wk" | "wv" | "wo" => ParamClass::Attention,
                "w_up" | "w_down" => ParamClass::Ffn,
                "directions" => ParamClass::Direction,
                _ => ParamClass::Norm,
            }
        }
    }

    /// Only matrix weights of projections, FFNs and routers are decayed.
    pub fn decays(self) -> bool {
        matches!(self, ParamClass::Attention | ParamClass::Ffn | ParamClass::RouterWeight)
    }
}

impl<T: Scalar> RoutedLm<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let d = config.d_model;
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let tok_emb = init_params(&mut rng, &[config.vocab_size, d], InitScheme::Normal(std));
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut normal = |shape: &[usize], s: f64| init_params::<T>(&mut rng, shape, InitScheme::Normal(s));
            let attn_norm = Tensor::ones([d]);
            let wq = normal(&[d, d], std);
            let wk = normal(&[d, d], std);
            let wv = normal(&[d, d], std);
            let wo = normal(&[d, d], resid_std);
            let ffn_norm = Tensor::ones([d]);
            let w_up = normal(&[d, config.d_ffn()], std);
            let w_down = normal(&[config.d_ffn(), d], resid_std);
            let (directions, router) = if config.routing_active() {
                let dirs = normal(&[config.routing_width(), config.d_head], 1.0 / (config.d_head as f64).sqrt());
                let widths = router_widths(config);
                let layers = widths
                    .windows(2)
                    .enumerate()
                    .map(|(i, w)| Dense {
                        weight: if i + 1 == ROUTER_DEPTH {
                            // neutral start: r = σ(0) = 0.5 everywhere
                            Tensor::zeros([w[0], w[1]])
                        } else {
                            normal(&[w[0], w[1]], 1.0 / (w[0] as f64).sqrt())
                        },
                        bias: Tensor::zeros([w[1]]),
                    })
                    .collect();
                let router = RouterParams {
                    norm_gain: Tensor::ones([d]),
                    norm_bias: Tensor::zeros([d]),
                    layers,
                };
                (Some(dirs), Some(router))
            } else {
                (None, None)
            };
            blocks.push(Block {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                ffn_norm,
                w_up,
                w_down,
                directions,
                router,
            });
        }
        Ok(Self {
            config: config.clone(),
            tok_emb,
            blocks,
            final_norm: Tensor::ones([d]),
        })
    }

    /// Parameters in canonical order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![("tok_emb".into(), &self.tok_emb)];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("blocks.{i}.{s}");
            out.push((p("attn_norm"), &b.attn_norm));
            out.push((p("wq"), &b.wq));
            out.push((p("wk"), &b.wk));
            out.push((p("wv"), &b.wv));
            out.push((p("wo"), &b.wo));
            out.push((p("ffn_norm"), &b.ffn_norm));
            out.push((p("w_up"), &b.w_up));
            out.push((p("w_down"), &b.w_down));
            if let Some(dirs) = &b.directions {
                out.push((p("directions"), dirs));
            }
            if let Some(r) = &b.router {
                out.push((p("router.norm_gain"), &r.norm_gain));
                out.push((p("router.norm_bias"), &r.norm_bias));
                for (j, l) in r.layers.iter().enumerate() {
                    out.push((p(&format!("router.{j}.weight")), &l.weight));
                    out.push((p(&format!("router.{j}.bias")), &l.bias));
                }
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        out
    }

    /// Mutable parameters in the same order as [`named_params`](Self::named_params).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = vec![&mut self.tok_emb];
        for b in self.blocks.iter_mut() {
            out.push(&mut b.attn_norm);
            out.push(&mut b.wq);
            out.push(&mut b.wk);
            out.push(&mut b.wv);
            out.push(&mut b.wo);
            out.push(&mut b.ffn_norm);
            out.push(&mut b.w_up);
            out.push(&mut b.w_down);
            if let Some(dirs) = &mut b.directions {
                out.push(dirs);
            }
            if let Some(r) = &mut b.router {
                out.push(&mut r.norm_gain);
                out.push(&mut r.norm_bias);
                for l in r.layers.iter_mut() {
                    out.push(&mut l.weight);
                    out.push(&mut l.bias);
                }
            }
        }
        out.push(&mut self.final_norm);
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        self.named_params().into_iter().map(|(n, _)| n).collect()
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Rebuilds a model from named tensors, checking names and shapes
    /// against a freshly laid out model of `config`.
    pub fn from_named(config: &ModelConfig, mut tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let mut model = Self::zeros_like_config(config)?;
        let names = model.param_names();
        for (name, slot) in names.iter().zip(model.params_mut()) {
            let t = tensors
                .remove(name)
                .ok_or_else(|| Error::Integrity(format!("missing tensor `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Integrity(format!(
                    "tensor `{name}` has shape {:?}, config expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Integrity(format!("unexpected tensor `{extra}`")));
        }
        Ok(model)
    }

    fn zeros_like_config(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut m = Self::init(config, 0)?;
        for p in m.params_mut() {
            p.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
        Ok(m)
    }

    /// Structurally identical model with routing removed; shares every
    /// non-routing weight.
    pub fn to_baseline(&self) -> Self {
        let mut m = self.clone();
        m.config = self.config.baseline();
        for b in m.blocks.iter_mut() {
            b.directions = None;
            b.router = None;
        }
        m
    }

    pub fn cast<U: Scalar>(&self) -> RoutedLm<U> {
        let names: Vec<(String, Tensor<U>)> = self.named_params().into_iter().map(|(n, t)| (n, t.cast())).collect();
        RoutedLm::from_named(&self.config, names.into_iter().collect()).expect("same layout")
    }
}

fn router_widths(config: &ModelConfig) -> [usize; ROUTER_DEPTH + 1] {
    let h = config.router_hidden;
    [config.d_model, h, h, h, config.routing_width()]
}
