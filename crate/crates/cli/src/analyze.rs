use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};
use drt_core::analysis::{self, byte_token_text, Category};
use drt_core::interventions::{self, eval_sequences, RoutingMode};
use drt_core::model::{count_flops, count_params, ModelConfig, RoutedLm};
use drt_core::numerics::Rng;
use drt_core::training::{byte_tokenize, make_induction_corpus, Checkpoint, Corpus};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{env_seed, ModelSpec, RunConfig};
use crate::error::CliError;
use crate::inputs::{domain_corpus, load_model, parse_domain, text_corpus};
use crate::report::{digests, write_report, ReportMeta, Table};

#[derive(Debug, Clone, Args, Serialize)]
pub struct Common {
    /// Checkpoint to analyse.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "reports")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Data {
    /// Plain-text evaluation corpus.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Domain file as NAME=PATH (repeatable).
    #[arg(long = "domain", value_name = "NAME=PATH")]
    pub domains: Vec<String>,
    /// Sequences kept per corpus or per domain.
    #[arg(long, default_value_t = 64)]
    pub max_seqs: usize,
    /// Sequence length; defaults to min(128, context).
    #[arg(long)]
    pub chunk: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelChoice {
    #[arg(long)]
    pub preset: Option<String>,
    /// JSON file holding a ModelConfig or a run config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "reports")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Probe {
    /// Prompt text (byte tokens).
    #[arg(long)]
    pub prompt: String,
    /// Target as a one-byte string.
    #[arg(long, conflicts_with = "target_id")]
    pub target: Option<String>,
    #[arg(long)]
    pub target_id: Option<u32>,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnalyzeCmd {
    /// Parameter breakdown by component class.
    Params(ModelChoice),
    /// Forward FLOPs per sequence length.
    Flops {
        #[command(flatten)]
        model: ModelChoice,
        #[arg(long = "seq-len", value_delimiter = ',', default_value = "128,1024")]
        seq_lens: Vec<usize>,
    },
    /// Confidence half-width for a difference of two proportions.
    Ci {
        #[arg(long)]
        p1: f64,
        #[arg(long)]
        p2: f64,
        #[arg(long)]
        n: u64,
        #[arg(long, default_value = "reports")]
        out: PathBuf,
    },
    /// Target probability and logit under learned/off/neutral/full routing, plus mover-head knockout.
    Table1 {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        probe: Probe,
    },
    /// Marginal logit attribution per component class.
    Table2 {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        probe: Probe,
    },
    /// Induction accuracy: normal, routing off, top induction heads knocked out.
    Table3 {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 500)]
        n_seqs: usize,
        /// Sequence length; defaults to the checkpoint's training length.
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long, default_value_t = 15)]
        pattern_len: usize,
        #[arg(long, default_value_t = 3)]
        heads: usize,
    },
    /// Perplexity with routing off in one layer at a time.
    Table4 {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
    },
    /// Loss change from swapping learned routing between domains.
    Swap {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        /// Layers to swap (default: all).
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
    },
    /// Top vocabulary tokens of every direction.
    Vocab {
        #[command(flatten)]
        common: Common,
    },
    /// Lexicon category of every direction.
    Categories {
        #[command(flatten)]
        common: Common,
    },
    /// Force one category's directions to a routing mode.
    OverrideCategory {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        category: String,
        /// off, neutral, full, fixed:w or learned.
        #[arg(long, default_value = "off")]
        mode: String,
    },
    /// Leave-one-out nearest-centroid domain classification from routing.
    Fingerprint {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
    },
    /// Perplexity with every layer fixed to each weight.
    Grid {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")]
        grid: Vec<f64>,
    },
    /// Neutral-routing loss increase per layer and per layer set.
    Additivity {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        /// Layer set such as `1,2,3` (repeatable).
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Per-layer linear CKA between two checkpoints.
    Cka {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        baseline_ckpt: PathBuf,
        #[command(flatten)]
        data: Data,
    },
    /// Mean top-1 probability and entropy.
    Sharpness {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        baseline_ckpt: Option<PathBuf>,
        #[command(flatten)]
        data: Data,
    },
    /// Direction cosines, within-head angles, effective rank.
    Geometry {
        #[command(flatten)]
        common: Common,
    },
    /// Log-prob gain of learned routing over routing off, by position.
    Position {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
    },
    /// Routing shift from swapping versus replacing tokens.
    Sensitivity {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
    },
    /// Per-head routing means per domain, variance and specialists.
    Stats {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
    },
    /// Perplexity per domain.
    Ppl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        baseline_ckpt: Option<PathBuf>,
        #[command(flatten)]
        data: Data,
    },
}

impl AnalyzeCmd {
    fn name(&self) -> &'static str {
        match self {
            AnalyzeCmd::Params(_) => "params",
            AnalyzeCmd::Flops { .. } => "flops",
            AnalyzeCmd::Ci { .. } => "ci",
            AnalyzeCmd::Table1 { .. } => "table1",
            AnalyzeCmd::Table2 { .. } => "table2",
            AnalyzeCmd::Table3 { .. } => "table3",
            AnalyzeCmd::Table4 { .. } => "table4",
            AnalyzeCmd::Swap { .. } => "swap",
            AnalyzeCmd::Vocab { .. } => "vocab",
            AnalyzeCmd::Categories { .. } => "categories",
            AnalyzeCmd::OverrideCategory { .. } => "override-category",
            AnalyzeCmd::Fingerprint { .. } => "fingerprint",
            AnalyzeCmd::Grid { .. } => "grid",
            AnalyzeCmd::Additivity { .. } => "additivity",
            AnalyzeCmd::Cka { .. } => "cka",
            AnalyzeCmd::Sharpness { .. } => "sharpness",
            AnalyzeCmd::Geometry { .. } => "geometry",
            AnalyzeCmd::Position { .. } => "position",
            AnalyzeCmd::Sensitivity { .. } => "sensitivity",
            AnalyzeCmd::Stats { .. } => "stats",
            AnalyzeCmd::Ppl { .. } => "ppl",
        }
    }
}

fn model_config(m: &ModelChoice) -> Result<ModelConfig, CliError> {
    match (&m.preset, &m.config) {
        (Some(_), Some(_)) => Err(CliError::Usage("give --preset or --config, not both".into())),
        (None, Some(p)) => {
            let text = crate::inputs::read_text(p)?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            match serde_path_to_error::deserialize::<_, ModelConfig>(de) {
                Ok(c) => {
                    c.validate()?;
                    Ok(c)
                }
                Err(_) => RunConfig::from_json(&text)?.model.resolve(),
            }
        }
        (p, None) => ModelSpec::Preset(p.clone().unwrap_or_else(|| "toy".into())).resolve(),
    }
}

fn token_text(vocab: usize) -> impl Fn(u32) -> String {
    move |t| if vocab <= 256 { byte_token_text(t) } else { format!("<{t}>") }
}

fn probe_tokens(p: &Probe, vocab: usize) -> Result<(Vec<u32>, u32), CliError> {
    let tokens = byte_tokenize(&p.prompt);
    if tokens.is_empty() {
        return Err(CliError::Usage("--prompt is empty".into()));
    }
    let target = match (&p.target, p.target_id) {
        (_, Some(id)) => id,
        (Some(t), None) => match byte_tokenize(t)[..] {
            [id] => id,
            _ => return Err(CliError::Usage(format!("--target `{t}` is not a single byte token; use --target-id"))),
        },
        (None, None) => return Err(CliError::Usage("give --target or --target-id".into())),
    };
    if target as usize >= vocab {
        return Err(CliError::Usage(format!("target id {target} outside vocabulary of {vocab}")));
    }
    Ok((tokens, target))
}

/// Evaluation data resolved to sequences, plus the input files read.
struct Loaded {
    labeled: Vec<(String, Vec<u32>)>,
    files: Vec<PathBuf>,
}

impl Loaded {
    fn seqs(&self) -> Vec<Vec<u32>> {
        self.labeled.iter().map(|(_, s)| s.clone()).collect()
    }

    fn corpus(&self) -> Corpus {
        Corpus {
            kind: drt_core::training::CorpusKind::DomainTagged,
            docs: self
                .labeled
                .iter()
                .map(|(l, s)| drt_core::training::Document {
                    label: Some(l.clone()),
                    tokens: s.clone(),
                    queries: Vec::new(),
                })
                .collect(),
        }
    }
}

fn load_data(d: &Data, config: &ModelConfig, need_domains: bool) -> Result<Loaded, CliError> {
    let chunk = d.chunk.unwrap_or(128).min(config.max_seq_len);
    if chunk < 2 {
        return Err(CliError::Usage("--chunk must be at least 2".into()));
    }
    let mut labeled = Vec::new();
    let mut files = Vec::new();
    if !d.domains.is_empty() {
        let list = d.domains.iter().map(|s| parse_domain(s)).collect::<Result<Vec<_>, _>>()?;
        files.extend(list.iter().map(|(_, p)| p.clone()));
        let corpus = domain_corpus(&list)?;
        for (name, _) in &list {
            let one = Corpus {
                kind: corpus.kind,
                docs: corpus.docs.iter().filter(|x| x.label.as_deref() == Some(name.as_str())).cloned().collect(),
            };
            labeled.extend(eval_sequences(&one, chunk).into_iter().take(d.max_seqs).map(|s| (name.clone(), s)));
        }
    } else if let Some(p) = &d.corpus {
        if need_domains {
            return Err(CliError::Usage("this analysis needs --domain files".into()));
        }
        files.push(p.clone());
        let c = text_corpus(p)?;
        labeled.extend(eval_sequences(&c, chunk).into_iter().take(d.max_seqs).map(|s| ("text".to_string(), s)));
    } else {
        return Err(CliError::Usage("give --corpus or --domain".into()));
    }
    if labeled.is_empty() {
        return Err(CliError::Usage("evaluation data holds no sequence of at least 2 tokens".into()));
    }
    Ok(Loaded { labeled, files })
}

struct Output {
    payload: Value,
    table: Table,
    checkpoint: Option<PathBuf>,
    files: Vec<PathBuf>,
    seed: u64,
    out: PathBuf,
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

fn ckpt_out(common: &Common, seed: u64, payload: Value, table: Table, files: Vec<PathBuf>) -> Output {
    Output {
        payload,
        table,
        checkpoint: Some(common.ckpt.clone()),
        files,
        seed,
        out: common.out.clone(),
    }
}

fn parse_set(s: &str) -> Result<Vec<usize>, CliError> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| CliError::Usage(format!("bad layer set `{s}`"))))
        .collect()
}

fn seed_of(common: &Common) -> Result<u64, CliError> {
    Ok(common.seed.unwrap_or(env_seed(0)?))
}

fn execute(cmd: &AnalyzeCmd) -> Result<Output, CliError> {
    Ok(match cmd {
        AnalyzeCmd::Params(m) => {
            let c = model_config(m)?;
            let routed = count_params(&c);
            let baseline = count_params(&c.baseline());
            let mut t = Table::new(&["component", "params"]);
            for (k, v) in routed.rows() {
                t.push([k.to_string(), v.to_string()]);
            }
            t.push(["baseline_total".to_string(), baseline.total.to_string()]);
            Output {
                payload: json!({ "config": c, "routed": routed, "baseline_total": baseline.total }),
                table: t,
                checkpoint: None,
                files: Vec::new(),
                seed: env_seed(0)?,
                out: m.out.clone(),
            }
        }
        AnalyzeCmd::Flops { model, seq_lens } => {
            let c = model_config(model)?;
            let mut t = Table::new(&[
                "seq_len",
                "attention_proj",
                "attention_scores",
                "ffn",
                "lm_head",
                "router",
                "suppression",
                "total",
                "overhead_ratio",
            ]);
            let mut rows = Vec::new();
            for &n in seq_lens {
                let f = count_flops(&c, n);
                t.push([
                    n.to_string(),
                    f.attention_proj.to_string(),
                    f.attention_scores.to_string(),
                    f.ffn.to_string(),
                    f.lm_head.to_string(),
                    f.router.to_string(),
                    f.suppression.to_string(),
                    f.total().to_string(),
                    fmt(f.overhead_ratio()),
                ]);
                rows.push(json!({ "counts": f, "total": f.total(), "overhead_ratio": f.overhead_ratio() }));
            }
            Output {
                payload: json!({ "config": c, "rows": rows }),
                table: t,
                checkpoint: None,
                files: Vec::new(),
                seed: env_seed(0)?,
                out: model.out.clone(),
            }
        }
        AnalyzeCmd::Ci { p1, p2, n, out } => {
            let (delta, half) = analysis::proportion_ci(*p1, *p2, *n)?;
            let mut t = Table::new(&["p1", "p2", "n", "delta", "half_width"]);
            t.push([fmt(*p1), fmt(*p2), n.to_string(), fmt(delta), fmt(half)]);
            Output {
                payload: json!({ "p1": p1, "p2": p2, "n": n, "delta": delta, "half_width": half, "z": analysis::Z95 }),
                table: t,
                checkpoint: None,
                files: Vec::new(),
                seed: env_seed(0)?,
                out: out.clone(),
            }
        }
        AnalyzeCmd::Table1 { common, probe } => {
            let m = load_model(&common.ckpt)?;
            let (tokens, target) = probe_tokens(probe, m.config.vocab_size)?;
            let rows = analysis::routing_conditions(&m, &tokens, target)?;
            let mover = analysis::mover_head_knockout(&m, &tokens, target)?;
            let text = token_text(m.config.vocab_size);
            let mut t = Table::new(&["condition", "prob", "logit", "top_token", "top_text"]);
            for r in &rows {
                t.push([r.condition.clone(), fmt(r.prob), fmt(r.logit), r.top_token.to_string(), text(r.top_token)]);
            }
            t.push(["mover_ko".into(), fmt(mover.prob_knockout), String::new(), String::new(), String::new()]);
            let payload = json!({ "target": target, "rows": rows, "mover_knockout": mover });
            ckpt_out(common, seed_of(common)?, payload, t, vec![common.ckpt.clone()])
        }
        AnalyzeCmd::Table2 { common, probe } => {
            let m = load_model(&common.ckpt)?;
            let (tokens, target) = probe_tokens(probe, m.config.vocab_size)?;
            let rep = analysis::logit_attribution(&m, &tokens, target)?;
            let mut t = Table::new(&["component", "delta_logit"]);
            for (k, v) in rep.rows() {
                t.push([k.to_string(), fmt(v)]);
            }
            ckpt_out(common, seed_of(common)?, json!(rep), t, vec![common.ckpt.clone()])
        }
        AnalyzeCmd::Table3 {
            common,
            n_seqs,
            seq_len,
            pattern_len,
            heads,
        } => {
            let ck = Checkpoint::<f64>::load(&common.ckpt)?;
            let seed = seed_of(common)?;
            let n = seq_len.unwrap_or_else(|| ck.train_config.as_ref().map_or(32, |c| c.seq_len)) + 1;
            let corpus = make_induction_corpus(
                &mut Rng::new(seed).fork(23),
                *n_seqs,
                n,
                ck.model.config.vocab_size,
                *pattern_len,
            )?;
            let tab = analysis::induction_table(&ck.model, &corpus, *heads)?;
            let mut t = Table::new(&["condition", "accuracy"]);
            for r in &tab.rows {
                t.push([r.condition.clone(), fmt(r.accuracy)]);
            }
            ckpt_out(common, seed, json!(tab), t, vec![common.ckpt.clone()])
        }
        AnalyzeCmd::Table4 { common, data } => {
            let m = load_model(&common.ckpt)?;
            let d = load_data(data, &m.config, false)?;
            let sweep = interventions::layer_knockout_sweep(&m, &d.seqs())?;
            let mut t = Table::new(&["layer", "ppl", "delta_ppl"]);
            for r in &sweep.rows {
                t.push([r.layer.to_string(), fmt(r.ppl), fmt(r.delta_ppl)]);
            }
            ckpt_out(common, seed_of(common)?, json!(sweep), t, [vec![common.ckpt.clone()], d.files].concat())
        }
        AnalyzeCmd::Swap { common, data, layers } => {
            let m = load_model(&common.ckpt)?;
            let d = load_data(data, &m.config, true)?;
            let layers: Vec<usize> = if layers.is_empty() { (0..m.config.n_layers).collect() } else { layers.clone() };
            let mut firsts: Vec<(String, Vec<u32>)> = Vec::new();
            for (l, s) in &d.labeled {
                if !firsts.iter().any(|(x, _)| x == l) {
                    firsts.push((l.clone(), s.clone()));
                }
            }
            if firsts.len() < 2 {
                return Err(CliError::Usage("swap needs at least two domains".into()));
            }
            let mut t = Table::new(&["domain_a", "domain_b", "loss_a", "loss_b", "delta_a", "delta_b"]);
            let mut rows = Vec::new();
            for i in 0..firsts.len() {
                for j in i + 1..firsts.len() {
                    let r = interventions::routing_swap(&m, &firsts[i].1, &firsts[j].1, &layers)?;
                    t.push([
                        firsts[i].0.clone(),
                        firsts[j].0.clone(),
                        fmt(r.loss_a),
                        fmt(r.loss_b),
                        fmt(r.delta_a),
                        fmt(r.delta_b),
                    ]);
                    rows.push(json!({ "domain_a": firsts[i].0, "domain_b": firsts[j].0, "result": r }));
                }
            }
            let payload = json!({ "layers": layers, "pairs": rows });
            ckpt_out(common, seed_of(common)?, payload, t, [vec![common.ckpt.clone()], d.files].concat())
        }
        AnalyzeCmd::Vocab { common } => {
            let m = load_model(&common.ckpt)?;
            let rep = analysis::vocab_projection(&m)?;
            let text = token_text(m.config.vocab_size);
            let mut t = Table::new(&["layer", "head", "k", "rank", "token", "text", "score"]);
            for d in &rep {
                for (rank, &(tok, score)) in d.top.iter().enumerate() {
                    t.push([
                        d.layer.to_string(),
                        d.head.to_string(),
                        d.k.to_string(),
                        rank.to_string(),
                        tok.to_string(),
                        text(tok),
                        fmt(score),
                    ]);
                }
            }
            ckpt_out(common, seed_of(common)?, json!(rep), t, vec![common.ckpt.clone()])
        }
        AnalyzeCmd::Categories { common } => {
            let m = load_model(&common.ckpt)?;
            let rep = analysis::categorize_directions(&analysis::vocab_projection(&m)?, token_text(m.config.vocab_size));
            let mut t = Table::new(&["category", "percent"]);
            for (c, p) in &rep.distribution {
                t.push([c.name().to_string(), fmt(*p)]);
            }
            ckpt_out(common, seed_of(common)?, json!(rep), t, vec![common.ckpt.clone()])
        }
        AnalyzeCmd::OverrideCategory {
            common,
            data,
            category,
            mode,
        } => {
            let m = load_model(&common.ckpt)?;
            let cat = Category::ALL
                .into_iter()
                .find(|c| c.name() == category)
                .ok_or_else(|| CliError::Usage(format!("unknown category `{category}`")))?;
            let mode = RoutingMode::parse(mode)?;
            let text = token_text(m.config.vocab_size);
            let rep = analysis::categorize_directions(&analysis::vocab_projection(&m)?, &text);
            let dirs = analysis::directions_in(&rep, cat);
            let tokens: Vec<u32> = (0..m.config.vocab_size as u32)
                .filter(|&t| cat.matches(&analysis::normalize_token_text(&text(t))))
                .collect();
            if dirs.is_empty() {
                return Err(CliError::Usage(format!("no direction is categorized as {category}")));
            }
            let d = load_data(data, &m.config, false)?;
            let r = interventions::category_override(&m, &d.seqs(), &dirs, &tokens, &mode)?;
            let mut t = Table::new(&["category", "directions", "p_normal", "p_override", "delta"]);
            t.push([category.clone(), r.directions.to_string(), fmt(r.p_normal), fmt(r.p_override), fmt(r.delta)]);
            let payload = json!({ "category": category, "mode": mode, "slots": dirs, "tokens": tokens.len(), "result": r });
            ckpt_out(common, seed_of(common)?, payload, t, [vec![common.ckpt.clone()], d.files].concat())
        }
        AnalyzeCmd::Fingerprint { common, data } => {
            let m = load_model(&common.ckpt)?;
            let d = load_data(data, &m.config, true)?;
            let f = analysis::fingerprint_classify(&m, &d.labeled)?;
            let mut t = Table::new(&["label", "pc1", "pc2"]);
            for ((l, _), p) in d.labeled.iter().zip(&f.pca) {
                t.push([l.clone(), fmt(p[0]), fmt(p[1])]);
            }
            ckpt_out(common, seed_of(common)?, json!(f), t, [vec![common.ckpt.clone()], d.files].concat())
        }
        AnalyzeCmd::Grid { common, data, grid } => {
            let m = load_model(&common.ckpt)?;
            let d = load_data(data, &m.config, false)?;
            let g = analysis::fixed_weight_grid(&m, &d.seqs(), grid)?;
            let mut t = Table::new(&["w", "ppl"]);
            for r in &g.rows {
                t.push([fmt(r.w), fmt(r.ppl)]);
            }
            t.push(["learned".to_string(), fmt(g.learned_ppl)]);
            ckpt_out(common, seed_of(common)?, json!(g), t, [vec![common.ckpt.clone()], d.files].concat())
        }
        AnalyzeCmd::Additivity { common, data, sets } => {
            let m = load_model(&common.ckpt)?;
            let d = load_data(data, &m.config, false)?;
            let sets = if sets.is_empty() {
                vec![(0..m.config.n_layers).collect()]
            } else {
                sets.iter().map(|s| parse_set(s)).collect::<Result<Vec<_>, _>>()?
            };
            let a = analysis::layer_additivity(&m, &d.seqs(), &sets)?;
            let mut t = Table::new(&["layers", "delta_loss", "sum_of_singletons", "interaction"]);
            for (l, v) in a.singletons.iter().enumerate() {
                t.push([l.to_string(), fmt(*v), fmt(*v), "0".into()]);
            }
            for s in &a.sets {
                let name: Vec<String> = s.layers.iter().map(|x| x.to_string()).collect();
                t.push([name.join("+"), fmt(s.delta_loss), fmt(s.sum_of_singletons), fmt(s.interaction)]);
            }
            ckpt_out(common, seed_of(common)?, json!(a), t, [vec![common.ckpt.clone()], d.files].concat())
        }
        AnalyzeCmd::Cka {
            common,
            baseline_ckpt,
            data,
        } => {
            let m = load_model(&common.ckpt)?;
            let b = load_model(baseline_ckpt)?;
            let d = load_data(data, &m.config, false)?;
            let c = analysis::layer_cka(&m, &b, &d.seqs())?;
            let mut t = Table::new(&["layer", "cka"]);
            for (l, v) in c.per_layer.iter().enumerate() {
                t.push([l.to_string(), fmt(*v)]);
            }
            let files = [vec![common.ckpt.clone(), baseline_ckpt.clone()], d.files].concat();
            ckpt_out(common, seed_of(common)?, json!(c), t, files)
        }
        AnalyzeCmd::Sharpness {
            common,
            baseline_ckpt,
            data,
        } => {
            let m = load_model(&common.ckpt)?;
            let d = load_data(data, &m.config, false)?;
            let seqs = d.seqs();
            let mut rows = vec![("routed".to_string(), analysis::sharpness_stats(&m, &seqs, None)?)];
            if m.config.routing_active() {
                let off = interventions::InterventionSpec::all_layers(m.config.n_layers, RoutingMode::Off);
                rows.push(("routing_off".into(), analysis::sharpness_stats(&m, &seqs, Some(&off))?));
            }
            let mut files = vec![common.ckpt.clone()];
            if let Some(p) = baseline_ckpt {
                let b: RoutedLm<f64> = load_model(p)?;
                rows.push(("baseline".into(), analysis::sharpness_stats(&b, &seqs, None)?));
                files.push(p.clone());
            }
            files.extend(d.files);
            let mut t = Table::new(&["model", "top1", "entropy", "positions"]);
            for (n, s) in &rows {
                t.push([n.clone(), fmt(s.top1), fmt(s.entropy), s.positions.to_string()]);
            }
            let payload: Value = rows.iter().map(|(n, s)| json!({ "model": n, "stats": s })).collect();
            ckpt_out(common, seed_of(common)?, payload, t, files)
        }
        AnalyzeCmd::Geometry { common } => {
            let m = load_model(&common.ckpt)?;
            let seed = seed_of(common)?;
            let g = analysis::direction_geometry(&m, &mut Rng::new(seed))?;
            let mut t = Table::new(&["i", "j", "cosine"]);
            for (i, row) in g.cosines.iter().enumerate() {
                for (j, c) in row.iter().enumerate() {
                    t.push([i.to_string(), j.to_string(), fmt(*c)]);
                }
            }
            ckpt_out(common, seed, json!(g), t, vec![common.ckpt.clone()])
        }
        AnalyzeCmd::Position { common, data } => {
            let m = load_model(&common.ckpt)?;
            let d = load_data(data, &m.config, false)?;
            let b = analysis::position_benefit(&m, &d.seqs(), None)?;
            let mut t = Table::new(&["bucket", "count", "delta_log_prob"]);
            for x in &b {
                t.push([x.label.clone(), x.count.to_string(), x.delta_log_prob.map_or(String::new(), fmt)]);
            }
            ckpt_out(common, seed_of(common)?, json!(b), t, [vec![common.ckpt.clone()], d.files].concat())
        }
        AnalyzeCmd::Sensitivity { common, data } => {
            let m = load_model(&common.ckpt)?;
            let d = load_data(data, &m.config, false)?;
            let seed = seed_of(common)?;
            let s = analysis::token_sensitivity(&m, &d.seqs(), &mut Rng::new(seed))?;
            let mut t = Table::new(&["layer", "swap", "replace"]);
            for l in 0..s.swap_per_layer.len() {
                t.push([l.to_string(), fmt(s.swap_per_layer[l]), fmt(s.replace_per_layer[l])]);
            }
            t.push(["all".to_string(), fmt(s.swap), fmt(s.replace)]);
            ckpt_out(common, seed, json!(s), t, [vec![common.ckpt.clone()], d.files].concat())
        }
        AnalyzeCmd::Stats { common, data } => {
            let m = load_model(&common.ckpt)?;
            let d = load_data(data, &m.config, true)?;
            let s = analysis::routing_stats(&m, &d.corpus())?;
            let mut header = vec!["layer".to_string(), "head".to_string()];
            header.extend(s.domains.iter().cloned());
            header.extend(["variance".to_string(), "specialist".to_string()]);
            let mut t = Table {
                header,
                rows: Vec::new(),
            };
            for h in &s.heads {
                let mut row = vec![h.layer.to_string(), h.head.to_string()];
                row.extend(h.domain_means.iter().map(|v| fmt(*v)));
                row.extend([fmt(h.variance), h.specialist.to_string()]);
                t.rows.push(row);
            }
            ckpt_out(common, seed_of(common)?, json!(s), t, [vec![common.ckpt.clone()], d.files].concat())
        }
        AnalyzeCmd::Ppl {
            common,
            baseline_ckpt,
            data,
        } => {
            let m = load_model(&common.ckpt)?;
            let d = load_data(data, &m.config, false)?;
            let corpus = d.corpus();
            let mut rows = vec![("routed".to_string(), analysis::domain_perplexity(&m, &corpus, None)?)];
            let mut files = vec![common.ckpt.clone()];
            if let Some(p) = baseline_ckpt {
                rows.push(("baseline".into(), analysis::domain_perplexity(&load_model(p)?, &corpus, None)?));
                files.push(p.clone());
            }
            files.extend(d.files);
            let mut t = Table::new(&["model", "domain", "tokens", "ppl"]);
            for (n, r) in &rows {
                for x in &r.domains {
                    t.push([n.clone(), x.domain.clone(), x.tokens.to_string(), fmt(x.ppl)]);
                }
                t.push([n.clone(), "overall".into(), String::new(), fmt(r.overall)]);
            }
            let payload: Value = rows.iter().map(|(n, r)| json!({ "model": n, "report": r })).collect();
            ckpt_out(common, seed_of(common)?, payload, t, files)
        }
    })
}

pub fn run(cmd: AnalyzeCmd) -> Result<(), CliError> {
    let out = execute(&cmd)?;
    let (config_digest, inputs_digest) = digests(&cmd, &out.files)?;
    let path = write_report(
        &out.out,
        cmd.name(),
        ReportMeta {
            config_digest,
            inputs_digest,
            checkpoint: out.checkpoint.as_deref().map(|p: &Path| p.display().to_string()),
            seed: out.seed,
        },
        out.payload,
        &out.table,
    )?;
    println!("{}", path.display());
    Ok(())
}
