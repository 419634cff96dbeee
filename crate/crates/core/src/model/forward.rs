use crate::error::{Error, Result};
use crate::interventions::{InterventionSpec, LayerPlan, RoutingSource};
use crate::model::config::{ModelConfig, DIRECTION_EPS, NORM_EPS, ROPE_BASE};
use crate::model::params::RoutedLm;
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Which residual contributions are kept during a forward pass. Dropping a
/// component replaces its output with zeros; everything downstream still
/// runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Components {
    pub embedding: bool,
    /// Unsuppressed head outputs `o`.
    pub raw_heads: bool,
    /// Suppression delta `o' − o`.
    pub routing_delta: bool,
    pub ffn: bool,
    /// Replace every norm with the identity and the FFN activation with the
    /// identity. Only meant for exact oracle tests.
    pub linearize: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            embedding: true,
            raw_heads: true,
            routing_delta: true,
            ffn: true,
            linearize: false,
        }
    }
}

/// Model parameters registered on a tape, mirroring [`RoutedLm`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub tok_emb: Var,
    pub blocks: Vec<BlockVars>,
    pub final_norm: Var,
}

#[derive(Debug, Clone)]
pub struct BlockVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_norm: Var,
    pub w_up: Var,
    pub w_down: Var,
    pub directions: Option<Var>,
    pub router: Option<RouterVars>,
}

#[derive(Debug, Clone)]
pub struct RouterVars {
    pub norm_gain: Var,
    pub norm_bias: Var,
    pub layers: Vec<(Var, Var)>,
}

impl ModelVars {
    /// Registers every parameter as a leaf, in canonical order.
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, model: &RoutedLm<T>, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor<T>| tape.leaf(t.clone(), trainable);
        let tok_emb = leaf(&model.tok_emb);
        let blocks = model
            .blocks
            .iter()
            .map(|b| BlockVars {
                attn_norm: leaf(&b.attn_norm),
                wq: leaf(&b.wq),
                wk: leaf(&b.wk),
                wv: leaf(&b.wv),
                wo: leaf(&b.wo),
                ffn_norm: leaf(&b.ffn_norm),
                w_up: leaf(&b.w_up),
                w_down: leaf(&b.w_down),
                directions: b.directions.as_ref().map(&mut leaf),
                router: b.router.as_ref().map(|r| RouterVars {
                    norm_gain: leaf(&r.norm_gain),
                    norm_bias: leaf(&r.norm_bias),
                    layers: r.layers.iter().map(|l| (leaf(&l.weight), leaf(&l.bias))).collect(),
                }),
            })
            .collect();
        let final_norm = leaf(&model.final_norm);
        Self {
            tok_emb,
            blocks,
            final_norm,
        }
    }

    /// Rebuilds the structure from handles listed in canonical order.
    pub fn from_slice(config: &ModelConfig, vars: &[Var]) -> Result<Self> {
        let mut it = vars.iter().copied();
        let mut next = || it.next().ok_or_else(|| Error::Contract("too few parameter handles".into()));
        let routed = config.routing_active();
        let tok_emb = next()?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let (attn_norm, wq, wk, wv, wo) = (next()?, next()?, next()?, next()?, next()?);
            let (ffn_norm, w_up, w_down) = (next()?, next()?, next()?);
            let (directions, router) = if routed {
                let dirs = next()?;
                let (norm_gain, norm_bias) = (next()?, next()?);
                let mut layers = Vec::new();
                for _ in 0..crate::model::ROUTER_DEPTH {
                    layers.push((next()?, next()?));
                }
                (
                    Some(dirs),
                    Some(RouterVars {
                        norm_gain,
                        norm_bias,
                        layers,
                    }),
                )
            } else {
                (None, None)
            };
            blocks.push(BlockVars {
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
        let final_norm = next()?;
        if it.next().is_some() {
            return Err(Error::Contract("too many parameter handles".into()));
        }
        Ok(Self {
            tok_emb,
            blocks,
            final_norm,
        })
    }

    /// All parameter handles in canonical order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb];
        for b in &self.blocks {
            out.extend([b.attn_norm, b.wq, b.wk, b.wv, b.wo, b.ffn_norm, b.w_up, b.w_down]);
            out.extend(b.directions);
            if let Some(r) = &b.router {
                out.extend([r.norm_gain, r.norm_bias]);
                for &(w, bias) in &r.layers {
                    out.extend([w, bias]);
                }
            }
        }
        out.push(self.final_norm);
        out
    }
}

/// Tape handles of the intermediate values of one layer.
#[derive(Debug, Clone)]
pub struct LayerVars {
    pub residual_in: Var,
    /// Router input after mean pooling, `[B, d_model]`.
    pub pooled: Option<Var>,
    /// Routing weights actually applied, `[B, H·K]`.
    pub routing: Option<Var>,
    pub head_raw: Var,
    pub head_suppressed: Var,
    pub attention: Var,
    pub residual_out: Var,
}

#[derive(Debug, Clone)]
pub struct TapeForward {
    pub logits: Var,
    pub layers: Vec<LayerVars>,
    pub batch: usize,
    pub seq_len: usize,
}

fn check_tokens(config: &ModelConfig, seqs: &[&[u32]]) -> Result<usize> {
    let n = seqs.first().map(|s| s.len()).ok_or(Error::EmptyInput("forward batch"))?;
    if n == 0 {
        return Err(Error::EmptyInput("token sequence"));
    }
    if n > config.max_seq_len {
        return Err(Error::Contract(format!(
            "sequence length {n} exceeds max_seq_len {}",
            config.max_seq_len
        )));
    }
    for s in seqs {
        if s.len() != n {
            return Err(Error::Contract("sequences in a batch must share one length".into()));
        }
        if let Some(&t) = s.iter().find(|&&t| t as usize >= config.vocab_size) {
            return Err(Error::Input(format!("token {t} outside vocabulary of {}", config.vocab_size)));
        }
    }
    Ok(n)
}

fn norm<T: Scalar>(tape: &mut Tape<T>, x: Var, gain: Var, comps: &Components) -> Result<Var> {
    if comps.linearize {
        Ok(x)
    } else {
        tape.layer_norm(x, gain, None, T::lit(NORM_EPS))
    }
}

/// Router MLP on the tape: pooled `[B, d]` → `σ(T·z)` of shape `[B, H·K]`.
pub fn router_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    router: &RouterVars,
    pooled: Var,
    temperature: f64,
) -> Result<Var> {
    let mut h = tape.layer_norm(pooled, router.norm_gain, Some(router.norm_bias), T::lit(NORM_EPS))?;
    let last = router.layers.len() - 1;
    for (i, &(w, b)) in router.layers.iter().enumerate() {
        h = tape.matmul(h, w)?;
        h = tape.add_row(h, b)?;
        if i < last {
            h = tape.gelu(h)?;
        }
    }
    let z = tape.scale(h, T::lit(temperature))?;
    tape.sigmoid(z)
}

/// Builds the full forward graph for a batch of equal-length sequences.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    config: &ModelConfig,
    seqs: &[&[u32]],
    plans: &[LayerPlan],
    comps: &Components,
) -> Result<TapeForward> {
    let n = check_tokens(config, seqs)?;
    if plans.len() != config.n_layers {
        return Err(Error::Contract("one layer plan per layer required".into()));
    }
    let batch = seqs.len();
    let rows = batch * n;
    let (h, dh, k, d) = (config.n_heads, config.d_head, config.n_directions, config.d_model);
    let hk = h * k;
    let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().map(|&t| t as usize)).collect();
    let mut x = if comps.embedding {
        tape.gather_rows(vars.tok_emb, &ids)?
    } else {
        tape.constant(Tensor::zeros([rows, d]))
    };
    let mut layers = Vec::with_capacity(config.n_layers);
    for (bv, plan) in vars.blocks.iter().zip(plans) {
        let residual_in = x;
        let a = norm(tape, x, bv.attn_norm, comps)?;
        let q = tape.matmul(a, bv.wq)?;
        let kk = tape.matmul(a, bv.wk)?;
        let v = tape.matmul(a, bv.wv)?;
        let q = tape.rope(q, h, n, ROPE_BASE)?;
        let kk = tape.rope(kk, h, n, ROPE_BASE)?;
        let o = tape.causal_attention(q, kk, v, h, n)?;
        let (mut o_sup, mut pooled, mut routing) = (o, None, None);
        if let Some(dirs) = bv.directions.filter(|_| config.routing_active()) {
            let p = tape.mean_rows_grouped(a, batch)?;
            pooled = Some(p);
            let r = match &plan.routing {
                RoutingSource::Learned => {
                    let router = bv
                        .router
                        .as_ref()
                        .ok_or_else(|| Error::Contract("routed layer without router".into()))?;
                    router_on_tape(tape, router, p, config.temperature)?
                }
                RoutingSource::Constant(w) => tape.constant(Tensor::full([batch, hk], T::lit(*w))),
                RoutingSource::Matrix(m) => {
                    let data: Vec<T> = (0..batch).flat_map(|_| m.iter().map(|&w| T::lit(w))).collect();
                    tape.constant(Tensor::new([batch, hk], data)?)
                }
            };
            let r = if plan.overrides.is_empty() {
                r
            } else {
                let mut mask = vec![false; batch * hk];
                let mut values = vec![T::zero(); batch * hk];
                for b in 0..batch {
                    for &(idx, w) in &plan.overrides {
                        mask[b * hk + idx] = true;
                        values[b * hk + idx] = T::lit(w);
                    }
                }
                tape.override_entries(r, &mask, &values)?
            };
            routing = Some(r);
            let unit = tape.normalize_rows(dirs, T::lit(DIRECTION_EPS))?;
            o_sup = tape.suppress(o, unit, r, h, k, n)?;
        }
        let head_suppressed = o_sup;
        if !plan.knockouts.is_empty() {
            let mut keep = vec![T::one(); rows * d];
            for row in keep.chunks_mut(d) {
                for &head in &plan.knockouts {
                    row[head * dh..(head + 1) * dh].iter_mut().for_each(|x| *x = T::zero());
                }
            }
            let mask = tape.constant(Tensor::new([rows, d], keep)?);
            o_sup = tape.mul(o_sup, mask)?;
        }
        let head_out = match (comps.raw_heads, comps.routing_delta) {
            (true, true) => o_sup,
            (true, false) => o,
            (false, true) => tape.sub(o_sup, o)?,
            (false, false) => tape.constant(Tensor::zeros([rows, d])),
        };
        let attn = tape.matmul(head_out, bv.wo)?;
        x = tape.add(x, attn)?;
        if comps.ffn {
            let f = norm(tape, x, bv.ffn_norm, comps)?;
            let up = tape.matmul(f, bv.w_up)?;
            let act = if comps.linearize { up } else { tape.gelu(up)? };
            let down = tape.matmul(act, bv.w_down)?;
            x = tape.add(x, down)?;
        }
        layers.push(LayerVars {
            residual_in,
            pooled,
            routing,
            head_raw: o,
            head_suppressed,
            attention: o,
            residual_out: x,
        });
    }
    let f = norm(tape, x, vars.final_norm, comps)?;
    let logits = tape.matmul_bt(f, vars.tok_emb)?;
    Ok(TapeForward {
        logits,
        layers,
        batch,
        seq_len: n,
    })
}

/// Per-sequence record of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace<T> {
    /// `[n, d_model]`
    pub residual_in: Tensor<T>,
    /// Concatenated head outputs before suppression, `[n, H·d_head]`.
    pub head_raw: Tensor<T>,
    /// After suppression, before any knockout.
    pub head_suppressed: Tensor<T>,
    /// Applied routing weights `[H, K]`; `None` without routing.
    pub routing: Option<Tensor<T>>,
    /// Mean-pooled router input `[d_model]`.
    pub pooled: Option<Tensor<T>>,
    /// Attention probabilities `[H, n, n]`.
    pub attention: Tensor<T>,
    /// Post-block residual stream `[n, d_model]`.
    pub residual_out: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    pub layers: Vec<LayerTrace<T>>,
    /// `[n, vocab]`
    pub logits: Tensor<T>,
}

/// Routing weights of one sequence, one `[H, K]` tensor per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision<T> {
    pub layers: Vec<Tensor<T>>,
    /// Mean-pooled router input per layer.
    pub pooled: Vec<Tensor<T>>,
}

impl<T: Scalar> RoutingDecision<T> {
    /// All weights, layer-major, as one vector.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|t| t.data().iter().map(|x| x.as_f64())).collect()
    }
}

impl<T: Scalar> ForwardTrace<T> {
    /// `None` when the model has no routing.
    pub fn routing_decision(&self) -> Option<RoutingDecision<T>> {
        let layers: Option<Vec<_>> = self.layers.iter().map(|l| l.routing.clone()).collect();
        let pooled: Option<Vec<_>> = self.layers.iter().map(|l| l.pooled.clone()).collect();
        Some(RoutingDecision {
            layers: layers?,
            pooled: pooled?,
        })
    }

    /// Log-softmax of the logits, computed in f64.
    pub fn log_probs(&self) -> Vec<Vec<f64>> {
        log_softmax_rows(&self.logits)
    }
}

pub fn log_softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    let v = logits.cols();
    logits
        .data()
        .chunks(v)
        .map(|row| {
            let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
            row.iter().map(|x| x.as_f64() - lse).collect()
        })
        .collect()
}

/// Output of a batched inference pass.
#[derive(Debug, Clone)]
pub struct BatchOutput<T> {
    /// One `[n, vocab]` tensor per sequence.
    pub logits: Vec<Tensor<T>>,
    pub traces: Option<Vec<ForwardTrace<T>>>,
}

fn split_rows<T: Scalar>(t: &Tensor<T>, parts: usize) -> Result<Vec<Tensor<T>>> {
    let per = t.numel() / parts;
    let cols = t.cols();
    t.data()
        .chunks(per)
        .map(|c| Tensor::new([per / cols, cols], c.to_vec()))
        .collect()
}

/// Inference over equal-length sequences with an optional intervention.
pub fn forward_batch<T: Scalar>(
    model: &RoutedLm<T>,
    seqs: &[&[u32]],
    spec: Option<&InterventionSpec>,
    comps: &Components,
    trace: bool,
) -> Result<BatchOutput<T>> {
    let config = &model.config;
    let plans = match spec {
        Some(s) => s.plan(config)?,
        None => (0..config.n_layers).map(|_| LayerPlan::learned()).collect(),
    };
    let mut tape = Tape::new();
    let vars = ModelVars::bind(&mut tape, model, false);
    let fwd = forward_on_tape(&mut tape, &vars, config, seqs, &plans, comps)?;
    let logits = tape.value(fwd.logits);
    if !logits.is_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let batch = fwd.batch;
    let logit_parts = split_rows(logits, batch)?;
    let traces = if trace {
        let n = fwd.seq_len;
        let (h, k) = (config.n_heads, config.n_directions);
        let mut per_seq: Vec<Vec<LayerTrace<T>>> = (0..batch).map(|_| Vec::new()).collect();
        for lv in &fwd.layers {
            let res_in = split_rows(tape.value(lv.residual_in), batch)?;
            let raw = split_rows(tape.value(lv.head_raw), batch)?;
            let sup = split_rows(tape.value(lv.head_suppressed), batch)?;
            let res_out = split_rows(tape.value(lv.residual_out), batch)?;
            let probs = tape
                .attention_probs(lv.attention)
                .ok_or_else(|| Error::Contract("attention probabilities missing".into()))?;
            let routing = match lv.routing {
                Some(r) => Some(split_rows(tape.value(r), batch)?),
                None => None,
            };
            let pooled = match lv.pooled {
                Some(p) => Some(split_rows(tape.value(p), batch)?),
                None => None,
            };
            for (b, seq) in per_seq.iter_mut().enumerate() {
                let att = probs[b * h * n * n..(b + 1) * h * n * n].to_vec();
                seq.push(LayerTrace {
                    residual_in: res_in[b].clone(),
                    head_raw: raw[b].clone(),
                    head_suppressed: sup[b].clone(),
                    routing: match &routing {
                        Some(r) => Some(r[b].clone().reshape([h, k])?),
                        None => None,
                    },
                    pooled: match &pooled {
                        Some(p) => Some(p[b].clone().reshape([config.d_model])?),
                        None => None,
                    },
                    attention: Tensor::new([h, n, n], att)?,
                    residual_out: res_out[b].clone(),
                });
            }
        }
        Some(
            per_seq
                .into_iter()
                .zip(&logit_parts)
                .map(|(layers, l)| ForwardTrace {
                    layers,
                    logits: l.clone(),
                })
                .collect(),
        )
    } else {
        None
    };
    Ok(BatchOutput {
        logits: logit_parts,
        traces,
    })
}

/// Single-sequence forward pass returning `[n, vocab]` logits and, if
/// requested, the full trace.
pub fn lm_forward<T: Scalar>(
    model: &RoutedLm<T>,
    tokens: &[u32],
    spec: Option<&InterventionSpec>,
    trace: bool,
) -> Result<(Tensor<T>, Option<ForwardTrace<T>>)> {
    let mut out = forward_batch(model, &[tokens], spec, &Components::default(), trace)?;
    let logits = out.logits.pop().expect("one sequence");
    let tr = out.traces.and_then(|mut t| t.pop());
    Ok((logits, tr))
}

/// Routing weights the learned routers produce for one sequence.
pub fn routing_decision<T: Scalar>(model: &RoutedLm<T>, tokens: &[u32]) -> Result<Option<RoutingDecision<T>>> {
    let (_, trace) = lm_forward(model, tokens, None, true)?;
    Ok(trace.expect("trace requested").routing_decision())
}

/// Unit-normalizes each direction (row) of a bank.
pub fn normalize_directions<T: Scalar>(bank: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let b = tape.constant(bank.clone());
    let out = tape.normalize_rows(b, T::lit(DIRECTION_EPS))?;
    Ok(tape.value(out).clone())
}

/// Suppresses one head output vector `o ∈ R^{d_head}` along `K` unit
/// directions `[K, d_head]` with weights `r ∈ R^K`.
pub fn suppress<T: Scalar>(o: &[T], dirs: &Tensor<T>, r: &[T]) -> Result<Vec<T>> {
    let k = dirs.rows();
    let mut tape = Tape::new();
    let ov = tape.constant(Tensor::new([1, o.len()], o.to_vec())?);
    let dv = tape.constant(dirs.clone());
    let rv = tape.constant(Tensor::new([1, r.len()], r.to_vec())?);
    if r.len() != k {
        return Err(Error::shape("suppress", dirs.shape(), &[r.len()]));
    }
    let out = tape.suppress(ov, dv, rv, 1, k, 1)?;
    Ok(tape.value(out).data().to_vec())
}

/// Evaluates one layer's router on a `[n, d_model]` input, returning `[H, K]`.
pub fn router_forward<T: Scalar>(model: &RoutedLm<T>, layer: usize, input: &Tensor<T>) -> Result<Tensor<T>> {
    let block = model
        .blocks
        .get(layer)
        .ok_or_else(|| Error::Contract(format!("layer {layer} out of range")))?;
    let router = block
        .router
        .as_ref()
        .ok_or_else(|| Error::Contract("model has no routing".into()))?;
    let mut tape = Tape::new();
    let rv = RouterVars {
        norm_gain: tape.constant(router.norm_gain.clone()),
        norm_bias: tape.constant(router.norm_bias.clone()),
        layers: router
            .layers
            .iter()
            .map(|l| (tape.constant(l.weight.clone()), tape.constant(l.bias.clone())))
            .collect(),
    };
    let x = tape.constant(input.clone());
    let pooled = tape.mean_rows_grouped(x, 1)?;
    let r = router_on_tape(&mut tape, &rv, pooled, model.config.temperature)?;
    tape.value(r)
        .clone()
        .reshape([model.config.n_heads, model.config.n_directions])
}
