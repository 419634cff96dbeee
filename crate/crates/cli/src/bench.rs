use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use drt_core::model::{forward_batch, Components, ModelConfig, RoutedLm};
use drt_core::numerics::Rng;
use drt_core::training::Checkpoint;
use serde::Serialize;

use crate::config::{env_seed, ModelSpec};
use crate::error::CliError;
use crate::report::{digests, write_report, ReportMeta, Table};

pub const DISCLAIMER: &str =
    "wall-clock throughput of this implementation on this machine; not comparable across hardware or builds";

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub preset: Option<String>,
    /// Benchmark a checkpoint's weights instead of a fresh preset.
    #[arg(long, conflicts_with = "preset")]
    pub ckpt: Option<PathBuf>,
    #[arg(long = "seq-len", value_delimiter = ',', default_value = "128,1024")]
    pub seq_lens: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub trials: usize,
    #[arg(long, default_value = "reports")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Throughput {
    pub trials: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub seq_len: usize,
    pub routed: Throughput,
    pub disabled: Throughput,
    /// Routed over disabled tokens per second.
    pub ratio: f64,
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub config: ModelConfig,
    pub rows: Vec<BenchRow>,
    pub disclaimer: &'static str,
}

fn measure(model: &RoutedLm<f32>, tokens: &[u32], trials: usize) -> Result<Throughput, CliError> {
    let comps = Components::default();
    forward_batch(model, &[tokens], None, &comps, false)?;
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        let t = Instant::now();
        forward_batch(model, &[tokens], None, &comps, false)?;
        out.push(tokens.len() as f64 / t.elapsed().as_secs_f64().max(1e-9));
    }
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    let variance = out.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / out.len() as f64;
    Ok(Throughput {
        trials: out,
        mean,
        variance,
    })
}

pub fn run(a: BenchArgs) -> Result<(), CliError> {
    if a.trials < 5 {
        return Err(CliError::Usage("bench needs at least 5 trials".into()));
    }
    if a.seq_lens.is_empty() || a.seq_lens.contains(&0) {
        return Err(CliError::Usage("sequence lengths must be positive".into()));
    }
    let seed = a.seed.unwrap_or(env_seed(0)?);
    let mut model = match &a.ckpt {
        Some(p) => Checkpoint::<f32>::load(p)?.model,
        None => {
            let c = ModelSpec::Preset(a.preset.clone().unwrap_or_else(|| "toy".into())).resolve()?;
            RoutedLm::<f32>::init(&c, seed)?
        }
    };
    // rotary positions carry no parameters, so the context can be widened
    let longest = *a.seq_lens.iter().max().expect("non-empty");
    model.config.max_seq_len = model.config.max_seq_len.max(longest);
    let disabled = model.to_baseline();
    let mut rng = Rng::new(seed);
    let mut rows = Vec::new();
    let mut t = Table::new(&["seq_len", "routed_tps", "routed_var", "disabled_tps", "disabled_var", "ratio"]);
    for &n in &a.seq_lens {
        let tokens: Vec<u32> = (0..n).map(|_| rng.below(model.config.vocab_size) as u32).collect();
        let r = measure(&model, &tokens, a.trials)?;
        let d = measure(&disabled, &tokens, a.trials)?;
        let ratio = r.mean / d.mean;
        t.push([
            n.to_string(),
            r.mean.to_string(),
            r.variance.to_string(),
            d.mean.to_string(),
            d.variance.to_string(),
            ratio.to_string(),
        ]);
        rows.push(BenchRow {
            seq_len: n,
            routed: r,
            disabled: d,
            ratio,
        });
    }
    let files: Vec<PathBuf> = a.ckpt.iter().cloned().collect();
    let (config_digest, inputs_digest) = digests(&a, &files)?;
    let report = BenchReport {
        config: model.config.clone(),
        rows,
        disclaimer: DISCLAIMER,
    };
    let path = write_report(
        &a.out,
        "bench",
        ReportMeta {
            config_digest,
            inputs_digest,
            checkpoint: a.ckpt.as_ref().map(|p| p.display().to_string()),
            seed,
        },
        report,
        &t,
    )?;
    println!("{}", path.display());
    Ok(())
}
