use std::path::{Path, PathBuf};

use clap::Args;
use drt_core::model::{ModelConfig, RoutedLm};
use drt_core::numerics::{Rng, Scalar};
use drt_core::training::{make_induction_corpus, Checkpoint, Corpus, MetricsLog, TrainConfig, Trainer};
use log::{info, warn};
use serde::Serialize;

use crate::config::{env_seed, ModelSpec, Models, Precision, RunConfig, Task};
use crate::error::CliError;
use crate::inputs::{domain_corpus, parse_domain, text_corpus};
use crate::report::{digests, write_report, ReportMeta, Table};

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// JSON run config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long, value_enum)]
    pub task: Option<Task>,
    /// Plain-text corpus for `--task text`.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Domain file for `--task domains`, as NAME=PATH (repeatable).
    #[arg(long = "domain", value_name = "NAME=PATH")]
    pub domains: Vec<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Peak learning rate; the floor becomes a tenth of it.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    #[arg(long, value_enum)]
    pub models: Option<Models>,
    /// Number of synthetic induction sequences.
    #[arg(long)]
    pub n_seqs: Option<usize>,
    #[arg(long)]
    pub pattern_len: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Config file, then `DRT_SEED`, then flags.
pub fn resolve(a: &TrainArgs) -> Result<RunConfig, CliError> {
    let mut rc = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    rc.seed = env_seed(rc.seed)?;
    if let Some(p) = &a.preset {
        rc.model = ModelSpec::Preset(p.clone());
    }
    if let Some(t) = a.task {
        rc.task = t;
    }
    if let Some(c) = &a.corpus {
        rc.corpus.text = Some(c.clone());
    }
    for d in &a.domains {
        let (name, path) = parse_domain(d)?;
        rc.corpus.domains.insert(name, path);
    }
    let mut tc = rc.train_config();
    if let Some(s) = a.steps {
        tc.steps = s;
        if a.warmup.is_none() && s > 0 && tc.warmup_steps >= s {
            tc.warmup_steps = s / 10;
            warn!("warmup shortened to {} steps to fit {s} steps", tc.warmup_steps);
        }
    }
    if let Some(b) = a.batch_size {
        tc.batch_size = b;
    }
    if let Some(n) = a.seq_len {
        tc.seq_len = n;
    }
    if let Some(lr) = a.lr {
        tc.peak_lr = lr;
        tc.min_lr = lr / 10.0;
    }
    if let Some(w) = a.warmup {
        tc.warmup_steps = w;
    }
    if let Some(s) = a.seed {
        rc.seed = s;
    }
    tc.seed = rc.seed;
    rc.train = Some(tc);
    if let Some(p) = a.precision {
        rc.precision = p;
    }
    if let Some(m) = a.models {
        rc.models = m;
    }
    if let Some(n) = a.n_seqs {
        rc.induction.n_seqs = n;
    }
    if let Some(p) = a.pattern_len {
        rc.induction.pattern_len = p;
    }
    if let Some(o) = &a.out {
        rc.out_dir = o.clone();
    }
    Ok(rc)
}

pub fn build_corpus(rc: &RunConfig, model: &ModelConfig, tc: &TrainConfig) -> Result<Corpus, CliError> {
    match rc.task {
        Task::Induction => Ok(make_induction_corpus(
            &mut Rng::new(rc.seed).fork(11),
            rc.induction.n_seqs,
            tc.seq_len + 1,
            model.vocab_size,
            rc.induction.pattern_len,
        )?),
        Task::Text => {
            let p = rc.corpus.text.as_ref().ok_or_else(|| CliError::Config {
                field: "corpus.text".into(),
                message: "text task needs a corpus file".into(),
            })?;
            text_corpus(p)
        }
        Task::Domains => {
            if rc.corpus.domains.is_empty() {
                return Err(CliError::Config {
                    field: "corpus.domains".into(),
                    message: "domain task needs at least one domain file".into(),
                });
            }
            let list: Vec<(String, PathBuf)> = rc.corpus.domains.clone().into_iter().collect();
            domain_corpus(&list)
        }
    }
}

#[derive(Debug, Serialize)]
struct TrainedModel {
    name: String,
    checkpoint: String,
    steps: usize,
    final_loss: Option<f64>,
    params: usize,
}

fn train_one<T: Scalar>(
    config: &ModelConfig,
    tc: &TrainConfig,
    corpus: &Corpus,
    seed: u64,
    path: &Path,
) -> Result<MetricsLog, CliError> {
    let model = RoutedLm::<T>::init(config, seed)?;
    let mut trainer = Trainer::new(model, tc.clone())?;
    if tc.steps > 0 {
        trainer.run(corpus)?;
    }
    let ckpt = Checkpoint {
        model: trainer.model,
        train_config: Some(tc.clone()),
        step: trainer.step as u64,
        opt: (tc.steps > 0).then_some(trainer.opt),
    };
    ckpt.save(path)?;
    Ok(trainer.metrics)
}

pub fn run(a: TrainArgs) -> Result<(), CliError> {
    let rc = resolve(&a)?;
    let config = rc.model.resolve()?;
    let tc = rc.train_config();
    tc.validate()?;
    let corpus = build_corpus(&rc, &config, &tc)?;
    corpus.check_vocab(config.vocab_size)?;
    let out = &rc.out_dir;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let rc_path = out.join("run_config.json");
    std::fs::write(&rc_path, serde_json::to_string_pretty(&rc).expect("config serializes") + "\n")
        .map_err(|e| CliError::io(&rc_path, e))?;

    let mut variants = Vec::new();
    if matches!(rc.models, Models::Routed | Models::Both) {
        variants.push(("routed", config.clone()));
    }
    if matches!(rc.models, Models::Baseline | Models::Both) {
        variants.push(("baseline", config.baseline()));
    }
    let mut trained = Vec::new();
    let mut table = Table::new(&["model", "step", "lr", "loss", "ppl"]);
    for (name, cfg) in variants {
        let path = out.join(format!("{name}.drtc"));
        info!("training {name} model for {} steps", tc.steps);
        let metrics = match rc.precision {
            Precision::F32 => train_one::<f32>(&cfg, &tc, &corpus, rc.seed, &path)?,
            Precision::F64 => train_one::<f64>(&cfg, &tc, &corpus, rc.seed, &path)?,
        };
        metrics.save(&out.join(format!("{name}_metrics.csv")))?;
        for r in &metrics.rows {
            table.push([name.to_string(), r.step.to_string(), r.lr.to_string(), r.loss.to_string(), r.ppl.to_string()]);
        }
        trained.push(TrainedModel {
            name: name.into(),
            checkpoint: path.display().to_string(),
            steps: tc.steps,
            final_loss: metrics.rows.last().map(|r| r.loss),
            params: drt_core::model::count_params(&cfg).total as usize,
        });
        info!("wrote {}", path.display());
    }
    let (config_digest, inputs_digest) = digests(&rc, &[])?;
    write_report(
        out,
        "train",
        ReportMeta {
            config_digest,
            inputs_digest,
            checkpoint: None,
            seed: rc.seed,
        },
        trained,
        &table,
    )?;
    Ok(())
}
