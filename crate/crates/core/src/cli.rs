//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::analysis::{self, SelectionTrace};
use crate::error::{Error, Result};
use crate::model::{self, DenseSpec, ModelConfig, TraceMode};
use crate::training::{
    self, load_checkpoint, save_checkpoint, Corpus, MetricsWriter, TrainConfig, TrainState, Vocabulary,
};

/// Size of the generated corpus used when `--corpus` is not given.
pub const SYNTHETIC_CORPUS_BYTES: usize = 1 << 20;
/// Fraction of the corpus held out for evaluation.
pub const HOLDOUT_FRACTION: f64 = 0.05;

#[derive(Parser, Debug)]
#[command(name = "moeut", version, about = "Shared-layer mixture-of-experts Transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write metrics, a checkpoint and a held-out perplexity.
    Train(TrainArgs),
    /// Held-out perplexity of a checkpoint.
    Eval(EvalArgs),
    /// Expert-usage statistics as CSV files.
    Analyze(AnalyzeArgs),
    /// Parameter count with a per-component breakdown.
    CountParams(CountArgs),
    /// Forward multiply-accumulates per sequence.
    CountMacs(MacArgs),
    /// Size a MoEUT from dense baseline dimensions.
    DeriveConfig(DeriveArgs),
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Model config JSON, or `{"model": {...}, "train": {...}}`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value; keys may be prefixed with `model.` or `train.`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// UTF-8 text file or directory; a synthetic grammar corpus is generated when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Token list, one per line; byte-level tokens when absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Worker threads for per-sequence work (results do not depend on it).
    #[arg(long = "device-threads", value_name = "N")]
    device_threads: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    steps: Option<usize>,
    /// Resume from this checkpoint directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Record expert selections on the held-out windows after training.
    #[arg(long)]
    trace: bool,
    /// Trace every group member instead of only the first.
    #[arg(long)]
    trace_all: bool,
    /// Log every N steps.
    #[arg(long, default_value_t = 10)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the held-out expert selections to `<out>/trace.jsonl`.
    #[arg(long)]
    trace: bool,
    #[arg(long)]
    trace_all: bool,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Selection trace (JSON lines).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Checkpoint for residual update norms.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Keep only the N most frequent tokens in per-token outputs.
    #[arg(long)]
    token_cap: Option<usize>,
    /// Number of held-out windows for residual update norms.
    #[arg(long, default_value_t = 8)]
    windows: usize,
}

#[derive(Args, Debug)]
struct CountArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct MacArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Sequence length; defaults to the model context length.
    #[arg(long)]
    seq_len: Option<usize>,
}

#[derive(Args, Debug)]
struct DeriveArgs {
    /// Dense dimensions, e.g. `d_model=1024,n_layers=18,H=16,d_head=64`.
    #[arg(long)]
    dense: String,
    #[arg(long)]
    target_params: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Model and training settings as stored in a run directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Parses `argv` (including the program name), runs the subcommand and returns the
/// process exit code: 0 on success, 1 for configuration errors, 2 for runtime errors.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("MOEUT_LOG", "info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                1
            } else {
                2
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => with_threads(a.data.device_threads, || cmd_train(&a)),
        Command::Eval(a) => with_threads(a.data.device_threads, || cmd_eval(&a)),
        Command::Analyze(a) => with_threads(a.data.device_threads, || cmd_analyze(&a)),
        Command::CountParams(a) => cmd_count_params(&a),
        Command::CountMacs(a) => cmd_count_macs(&a),
        Command::DeriveConfig(a) => cmd_derive(&a),
    }
}

fn with_threads(n: Option<usize>, f: impl FnOnce() -> Result<()> + Send) -> Result<()> {
    match n {
        None => f(),
        Some(0) => Err(Error::Config("--device-threads must be positive".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {n} threads: {e}")))?
            .install(f),
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()))
}

fn object(v: Value, what: &str) -> Result<Map<String, Value>> {
    match v {
        Value::Object(m) => Ok(m),
        _ => Err(Error::Config(format!("{what} must be a JSON object"))),
    }
}

fn train_field_names() -> Vec<String> {
    object(serde_json::to_value(TrainConfig::default()).expect("serializable"), "train")
        .expect("object")
        .keys()
        .cloned()
        .collect()
}

/// Applies `key=value` overrides to the model and train sections. A bare key is applied
/// to every section that has it; unknown keys are rejected.
pub fn apply_overrides(
    model: &mut Map<String, Value>,
    train: &mut Map<String, Value>,
    overrides: &[String],
) -> Result<()> {
    let model_keys = ModelConfig::field_names();
    let train_keys = train_field_names();
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not KEY=VALUE")))?;
        let value = parse_value(raw.trim());
        let key = key.trim();
        let (in_model, in_train, name) = if let Some(k) = key.strip_prefix("model.") {
            (true, false, k)
        } else if let Some(k) = key.strip_prefix("train.") {
            (false, true, k)
        } else {
            (true, true, key)
        };
        let mut hit = false;
        if in_model && model_keys.contains(&name) {
            model.insert(name.to_owned(), value.clone());
            hit = true;
        }
        if in_train && train_keys.iter().any(|k| k == name) {
            train.insert(name.to_owned(), value);
            hit = true;
        }
        if !hit {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
    }
    Ok(())
}

/// Resolves defaults, the config file and overrides (in increasing precedence).
pub fn resolve_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut model = object(serde_json::to_value(ModelConfig::default())?, "model")?;
    let mut train = Map::new();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
        let doc: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid JSON in {}: {e}", p.display())))?;
        let mut doc = object(doc, "config")?;
        if doc.contains_key("model") || doc.contains_key("train") {
            if let Some(m) = doc.remove("model") {
                model.extend(object(m, "model section")?);
            }
            if let Some(t) = doc.remove("train") {
                train = object(t, "train section")?;
            }
            if let Some(k) = doc.keys().next() {
                return Err(Error::Config(format!("unknown config section {k:?}")));
            }
        } else {
            model.extend(doc);
        }
    }
    // The training loss weights follow the model's unless given explicitly.
    let mut train_full = object(serde_json::to_value(TrainConfig::default())?, "train")?;
    for k in ["gamma", "delta"] {
        if let Some(v) = model.get(k) {
            train_full.insert(k.into(), v.clone());
        }
    }
    train_full.extend(train);
    apply_overrides(&mut model, &mut train_full, overrides)?;
    let model: ModelConfig =
        serde_json::from_value(Value::Object(model)).map_err(|e| Error::Config(format!("invalid model config: {e}")))?;
    model.validate()?;
    let train: TrainConfig =
        serde_json::from_value(Value::Object(train_full)).map_err(|e| Error::Config(format!("invalid train config: {e}")))?;
    train.validate()?;
    Ok(RunConfig { model, train })
}

fn write_snapshot<S: Serialize>(out: &Path, value: &S) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.json"), serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn load_vocab(path: Option<&Path>) -> Result<Vocabulary> {
    match path {
        None => Ok(Vocabulary::Bytes),
        Some(p) => Vocabulary::load(p).map_err(|e| Error::Config(format!("cannot load vocabulary {}: {e}", p.display()))),
    }
}

fn load_corpus(path: Option<&Path>, vocab: &Vocabulary, seed: u64) -> Result<Corpus> {
    match path {
        Some(p) => {
            if !p.exists() {
                return Err(Error::Config(format!("corpus {} does not exist", p.display())));
            }
            Corpus::load(p, vocab)
        }
        None => {
            info!("generating a {SYNTHETIC_CORPUS_BYTES}-byte synthetic grammar corpus (seed {seed})");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let text = training::synthetic_grammar_corpus(&mut rng, SYNTHETIC_CORPUS_BYTES);
            Corpus::from_text(&text, vocab)
        }
    }
}

fn check_vocab(vocab: &Vocabulary, model: &ModelConfig) -> Result<()> {
    if vocab.size() > model.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} tokens but the model's vocab_size is {}",
            vocab.size(),
            model.vocab_size
        )));
    }
    Ok(())
}

/// Consecutive windows of `ctx + 1` tokens, at most `limit` of them.
fn eval_windows(tokens: &[usize], ctx: usize, limit: usize) -> Vec<Vec<usize>> {
    tokens
        .chunks(ctx + 1)
        .filter(|w| w.len() >= 2)
        .take(limit)
        .map(|w| w[..w.len() - 1].to_vec())
        .collect()
}

fn trace_mode(all: bool) -> TraceMode {
    if all {
        TraceMode::AllMembers
    } else {
        TraceMode::FirstMember
    }
}

#[derive(Serialize)]
struct EvalReport {
    step: u64,
    perplexity: f64,
    tokens: usize,
    unigram_entropy_perplexity: f64,
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let out = a.cfg.out.clone().unwrap_or_else(|| PathBuf::from("runs/train"));
    let mut state = match &a.checkpoint {
        Some(ck) => {
            if a.cfg.config.is_some() || !a.cfg.overrides.is_empty() {
                return Err(Error::Config("--config/--set cannot be combined with --checkpoint".into()));
            }
            let mut s = load_checkpoint(ck)?;
            if let Some(steps) = a.steps {
                s.config.steps = steps.max(s.config.warmup_steps);
            }
            info!("resuming from {} at step {}", ck.display(), s.step);
            s
        }
        None => {
            let mut rc = resolve_config(a.cfg.config.as_deref(), &a.cfg.overrides)?;
            if let Some(seed) = a.cfg.seed {
                rc.train.seed = seed;
            }
            if let Some(steps) = a.steps {
                rc.train.steps = steps;
                rc.train.warmup_steps = rc.train.warmup_steps.min(steps);
            }
            TrainState::new(rc.model, rc.train)?
        }
    };
    let seed = state.config.seed;
    println!("seed {seed}");
    let run = RunConfig {
        model: state.model.config().clone(),
        train: state.config.clone(),
    };
    write_snapshot(&out, &run)?;
    let vocab = load_vocab(a.data.vocab.as_deref())?;
    check_vocab(&vocab, &run.model)?;
    let corpus = load_corpus(a.data.corpus.as_deref(), &vocab, seed)?;
    let (train_part, held) = corpus.split_holdout(HOLDOUT_FRACTION);
    info!(
        "{} training tokens, {} held-out tokens, {} parameters",
        train_part.len(),
        held.len(),
        state.model.params().num_elements()
    );
    let mut metrics = MetricsWriter::append(&out.join("metrics.jsonl"))?;
    while (state.step as usize) < state.config.steps {
        let m = state.step_on(&train_part)?;
        metrics.write(&m)?;
        if a.log_every > 0 && (m.step as usize % a.log_every == 0 || m.step as usize == state.config.steps) {
            info!(
                "step {} loss {:.4} ce {:.4} lr {:.2e} grad_norm {:.3}",
                m.step, m.loss, m.ce, m.lr, m.grad_norm
            );
        }
    }
    let ck = out.join("checkpoint");
    save_checkpoint(&state, &ck)?;
    info!("checkpoint written to {}", ck.display());
    if held.len() >= 2 {
        let ppl = training::evaluate_perplexity(&state.model, &held.tokens, state.config.context_length)?;
        let report = EvalReport {
            step: state.step,
            perplexity: ppl,
            tokens: held.len(),
            unigram_entropy_perplexity: training::unigram_entropy(&corpus.tokens).exp(),
        };
        std::fs::write(out.join("eval.json"), serde_json::to_vec_pretty(&report)?)?;
        println!("held-out perplexity {ppl:.4}");
        if a.trace {
            let windows = eval_windows(&held.tokens, state.config.context_length, usize::MAX);
            let trace = analysis::collect_trace(&state.model, &windows, trace_mode(a.trace_all))?;
            trace.write_jsonl(&out.join("trace.jsonl"))?;
            info!("{} selection records written", trace.len());
        }
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let seed = a.seed.unwrap_or(state.config.seed);
    println!("seed {seed}");
    let vocab = load_vocab(a.data.vocab.as_deref())?;
    check_vocab(&vocab, state.model.config())?;
    let corpus = load_corpus(a.data.corpus.as_deref(), &vocab, seed)?;
    let held = if a.data.corpus.is_some() {
        corpus.clone()
    } else {
        corpus.split_holdout(HOLDOUT_FRACTION).1
    };
    let ctx = state.config.context_length;
    let ppl = training::evaluate_perplexity(&state.model, &held.tokens, ctx)?;
    println!("perplexity {ppl:.6}");
    if let Some(out) = &a.out {
        write_snapshot(
            out,
            &RunConfig {
                model: state.model.config().clone(),
                train: state.config.clone(),
            },
        )?;
        let report = EvalReport {
            step: state.step,
            perplexity: ppl,
            tokens: held.len(),
            unigram_entropy_perplexity: training::unigram_entropy(&held.tokens).exp(),
        };
        std::fs::write(out.join("eval.json"), serde_json::to_vec_pretty(&report)?)?;
        if a.trace {
            let windows = eval_windows(&held.tokens, ctx, usize::MAX);
            let trace = analysis::collect_trace(&state.model, &windows, trace_mode(a.trace_all))?;
            trace.write_jsonl(&out.join("trace.jsonl"))?;
        }
    } else if a.trace {
        return Err(Error::Config("--trace needs --out".into()));
    }
    Ok(())
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<()> {
    let out = a.cfg.out.clone().unwrap_or_else(|| PathBuf::from("analysis"));
    if a.input.is_none() && a.checkpoint.is_none() && a.cfg.config.is_none() {
        return Err(Error::Config("analyze needs --input, --checkpoint or --config".into()));
    }
    std::fs::create_dir_all(&out)?;
    let mut snapshot = Map::new();
    if let Some(input) = &a.input {
        if !input.exists() {
            return Err(Error::Config(format!("trace file {} does not exist", input.display())));
        }
        let trace = SelectionTrace::read_jsonl(input, None)?;
        let hist = analysis::expert_layer_histogram(&trace)?;
        hist.write_csv(&out.join("expert_layer_histogram.csv"))?;
        analysis::write_expert_order_csv(&hist, &out.join("expert_order.csv"))?;
        analysis::write_diversity_csv(&trace, a.token_cap, &out.join("token_diversity.csv"))?;
        analysis::column_selection_iou(&trace)?.write_csv(&out.join("column_iou.csv"))?;
        analysis::write_specialization_csv(&trace, a.token_cap, &out.join("token_specialization.csv"))?;
        info!("{} records from {}", trace.len(), input.display());
        snapshot.insert("trace".into(), Value::String(input.display().to_string()));
        snapshot.insert("token_cap".into(), serde_json::to_value(a.token_cap)?);
    }
    if a.checkpoint.is_some() || a.cfg.config.is_some() {
        let (model, train) = match &a.checkpoint {
            Some(ck) => {
                let s = load_checkpoint(ck)?;
                (s.model, s.config)
            }
            None => {
                let mut rc = resolve_config(a.cfg.config.as_deref(), &a.cfg.overrides)?;
                if let Some(seed) = a.cfg.seed {
                    rc.train.seed = seed;
                }
                (model::Model::new(rc.model, rc.train.seed)?, rc.train)
            }
        };
        let seed = a.cfg.seed.unwrap_or(train.seed);
        println!("seed {seed}");
        let vocab = load_vocab(a.data.vocab.as_deref())?;
        check_vocab(&vocab, model.config())?;
        let corpus = load_corpus(a.data.corpus.as_deref(), &vocab, seed)?;
        let held = corpus.split_holdout(HOLDOUT_FRACTION).1;
        let windows = eval_windows(&held.tokens, train.context_length, a.windows);
        let norms = analysis::residual_update_norms(&model, &windows)?;
        analysis::write_update_norms_csv(&norms, &out.join("residual_update_norms.csv"))?;
        snapshot.insert(
            "run".into(),
            serde_json::to_value(RunConfig {
                model: model.config().clone(),
                train,
            })?,
        );
    }
    write_snapshot(&out, &snapshot)?;
    println!("analysis written to {}", out.display());
    Ok(())
}

fn cmd_count_params(a: &CountArgs) -> Result<()> {
    let rc = resolve_config(a.cfg.config.as_deref(), &a.cfg.overrides)?;
    let b = model::param_breakdown(&rc.model);
    println!("embedding        {:>14}", b.embedding);
    println!("classifier       {:>14}", b.classifier);
    println!("final_norm       {:>14}", b.final_norm);
    println!("attention/layer  {:>14}", b.attention);
    println!("ffn/layer        {:>14}", b.ffn);
    println!("norms/layer      {:>14}", b.norms);
    println!("group_size       {:>14}", b.group_size);
    println!("non_embedding    {:>14}", b.non_embedding());
    println!("total            {:>14}  ({:.1}M)", b.total, b.total as f64 / 1e6);
    if let Some(out) = &a.cfg.out {
        write_snapshot(out, &rc.model)?;
        std::fs::write(out.join("params.json"), serde_json::to_vec_pretty(&b)?)?;
    }
    Ok(())
}

fn cmd_count_macs(a: &MacArgs) -> Result<()> {
    let rc = resolve_config(a.cfg.config.as_deref(), &a.cfg.overrides)?;
    let t = a.seq_len.unwrap_or(rc.model.context_length);
    if t == 0 {
        return Err(Error::Config("--seq-len must be positive".into()));
    }
    let b = model::mac_breakdown(&rc.model, t);
    println!("sequence length  {t:>18}");
    println!("qk_projection    {:>18}", b.qk_projection);
    println!("value_output     {:>18}", b.value_output);
    println!("attention_matrix {:>18}", b.attention_matrix);
    println!("selectors        {:>18}", b.selectors);
    println!("ffn              {:>18}", b.ffn);
    println!("classifier       {:>18}", b.classifier);
    println!("total            {:>18}  ({:.3} GMAC)", b.total, b.total as f64 / 1e9);
    if let Some(out) = &a.cfg.out {
        write_snapshot(out, &rc.model)?;
        std::fs::write(out.join("macs.json"), serde_json::to_vec_pretty(&b)?)?;
    }
    Ok(())
}

/// Parses `d_model=1024,n_layers=18,H=16,d_head=64[,d_ff=..][,vocab_size=..]`.
pub fn parse_dense_spec(s: &str) -> Result<DenseSpec> {
    const KEYS: &[&str] = &["d_model", "n_layers", "H", "d_head", "d_ff", "vocab_size"];
    let mut m = Map::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("dense field {part:?} is not KEY=VALUE")))?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(Error::Config(format!("unknown dense field {k:?}")));
        }
        let v: u64 = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("dense field {k} must be a non-negative integer")))?;
        m.insert(k.to_owned(), v.into());
    }
    serde_json::from_value(Value::Object(m)).map_err(|e| Error::Config(format!("invalid dense spec: {e}")))
}

fn cmd_derive(a: &DeriveArgs) -> Result<()> {
    let dense = parse_dense_spec(&a.dense)?;
    let (cfg, how) = model::build_config_from_dense(&dense, a.target_params)?;
    let total = model::count_params(&cfg);
    info!(
        "derived by {}; {} parameters ({:.1}M)",
        serde_json::to_value(how)?.as_str().unwrap_or("?"),
        total,
        total as f64 / 1e6
    );
    println!("{}", cfg.to_json_pretty());
    if let Some(out) = &a.out {
        write_snapshot(out, &cfg)?;
    }
    Ok(())
}
