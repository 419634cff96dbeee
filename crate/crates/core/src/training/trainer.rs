use std::io::Write;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::LayerPlan;
use crate::model::{forward_on_tape, Components, ModelVars, ParamClass, RoutedLm};
use crate::numerics::{Rng, Scalar, Tape, Tensor};
use crate::training::{adamw_step, clip_grad_norm, lr_schedule, Corpus, OptState, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub ppl: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        if self.rows.is_empty() {
            buf.extend_from_slice(b"step,lr,loss,ppl\n");
        } else {
            self.write_csv(&mut buf)?;
        }
        Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }
}

/// Loss and gradients of the next-token objective on a batch of windows.
/// Each window of `n + 1` tokens yields `n` predictions.
pub fn batch_loss_and_grads<T: Scalar>(model: &RoutedLm<T>, windows: &[Vec<u32>]) -> Result<(f64, Vec<Tensor<T>>)> {
    let inputs: Vec<&[u32]> = windows.iter().map(|w| &w[..w.len() - 1]).collect();
    let targets: Vec<usize> = windows.iter().flat_map(|w| w[1..].iter().map(|&t| t as usize)).collect();
    let plans: Vec<LayerPlan> = (0..model.config.n_layers).map(|_| LayerPlan::learned()).collect();
    let mut tape = Tape::new();
    let vars = ModelVars::bind(&mut tape, model, true);
    let fwd = forward_on_tape(&mut tape, &vars, &model.config, &inputs, &plans, &Components::default())?;
    let loss = tape.cross_entropy(fwd.logits, &targets)?;
    let value = tape.value(loss).item().as_f64();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("training loss is {value}")));
    }
    tape.backward(loss)?;
    let grads = vars.all().into_iter().map(|v| tape.grad(v)).collect();
    Ok((value, grads))
}

/// Stateful training loop over one model.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: RoutedLm<T>,
    pub opt: OptState<T>,
    pub cfg: TrainConfig,
    pub step: usize,
    pub metrics: MetricsLog,
    rng: Rng,
    decay: Vec<bool>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: RoutedLm<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = OptState::new(model.named_params().into_iter().map(|(_, t)| t));
        let decay = model.param_names().iter().map(|n| ParamClass::of(n).decays()).collect();
        Ok(Self {
            rng: Rng::new(cfg.seed).fork(1),
            model,
            opt,
            cfg,
            step: 0,
            metrics: MetricsLog::default(),
            decay,
        })
    }

    /// One optimizer step on the given windows; returns (loss, lr).
    pub fn step_on(&mut self, windows: &[Vec<u32>]) -> Result<(f64, f64)> {
        let (loss, mut grads) = batch_loss_and_grads(&self.model, windows)?;
        clip_grad_norm(&mut grads, self.cfg.grad_clip);
        let lr = lr_schedule(self.step + 1, &self.cfg);
        let mut params = self.model.params_mut();
        adamw_step(&mut params, &grads, &self.decay, &mut self.opt, lr, &self.cfg)?;
        self.step += 1;
        Ok((loss, lr))
    }

    /// Runs until `cfg.steps`, sampling windows of `seq_len + 1` tokens.
    pub fn run(&mut self, corpus: &Corpus) -> Result<()> {
        if corpus.docs.is_empty() || corpus.num_tokens() == 0 {
            return Err(Error::EmptyInput("training corpus"));
        }
        corpus.check_vocab(self.model.config.vocab_size)?;
        while self.step < self.cfg.steps {
            let windows = corpus.sample_windows(&mut self.rng, self.cfg.batch_size, self.cfg.seq_len + 1)?;
            let (loss, lr) = self.step_on(&windows)?;
            if self.step % self.cfg.eval_every == 0 || self.step == self.cfg.steps {
                info!("step {} lr {lr:.3e} loss {loss:.4}", self.step);
                self.metrics.rows.push(MetricsRow {
                    step: self.step,
                    lr,
                    loss,
                    ppl: loss.exp(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: RoutedLm<T>,
    pub opt: OptState<T>,
    pub metrics: MetricsLog,
}

pub fn train_loop<T: Scalar>(model: RoutedLm<T>, corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    let mut t = Trainer::new(model, cfg.clone())?;
    t.run(corpus)?;
    Ok(TrainOutcome {
        model: t.model,
        opt: t.opt,
        metrics: t.metrics,
    })
}
