use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model, ModelConfig};
use crate::tensor::{Gradients, Graph, Scalar};

use super::data::Corpus;
use super::optim::{clip_by_global_norm, AdamW};
use super::schedule::lr_schedule;
use super::TrainConfig;

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub optimizer: AdamW,
    /// Completed optimizer steps.
    pub step: u64,
    /// Batch sampler.
    pub rng: ChaCha8Rng,
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub ce: f64,
    pub l_ffn: f64,
    pub l_att: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl TrainState {
    /// Fresh state: parameters initialized from `config.seed`, batch sampler seeded from
    /// a stream derived from the same seed.
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.context_length > model_config.context_length {
            return Err(Error::Config(format!(
                "training context {} exceeds model context_length {}",
                config.context_length, model_config.context_length
            )));
        }
        let model = Model::new(model_config, config.seed)?;
        let optimizer = AdamW::new(model.params(), config.weight_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            config,
            model,
            optimizer,
            step: 0,
            rng,
        })
    }

    /// Draws the next batch of `context_length + 1`-token windows.
    pub fn next_batch(&mut self, corpus: &Corpus) -> Result<Vec<Vec<usize>>> {
        corpus.sample_batch(&mut self.rng, self.config.batch_size, self.config.context_length + 1)
    }

    /// Samples a batch and applies one update.
    pub fn step_on(&mut self, corpus: &Corpus) -> Result<StepMetrics> {
        let batch = self.next_batch(corpus)?;
        train_step(self, &batch)
    }
}

struct SequenceResult {
    grads: Gradients<f32>,
    total: f64,
    ce: f64,
    l_ffn: f64,
    l_att: f64,
}

fn sequence_grads(model: &Model<f32>, tokens: &[usize], gamma: f64, delta: f64) -> Result<SequenceResult> {
    let mut g = Graph::new();
    let out = model.loss_weighted(&mut g, tokens, &ForwardOptions::default(), gamma, delta)?;
    let item = |v: Option<crate::Var>| v.map_or(0.0, |v| g.value(v).item().as_f64());
    let total = g.value(out.total).item().as_f64();
    let ce = g.value(out.ce).item().as_f64();
    let l_ffn = item(out.forward.ffn_aux);
    let l_att = item(out.forward.att_aux);
    let grads = g.backward(out.total)?;
    Ok(SequenceResult {
        grads,
        total,
        ce,
        l_ffn,
        l_att,
    })
}

/// Forward/backward over every sequence of `batch`, averaged; clip; AdamW update.
///
/// Sequences may be processed on several threads; gradients are summed in batch order so
/// the result does not depend on the thread count.
pub fn train_step(state: &mut TrainState, batch: &[Vec<usize>]) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let cfg = &state.config;
    let model = &state.model;
    let results: Vec<Result<SequenceResult>> = batch
        .par_iter()
        .map(|seq| sequence_grads(model, seq, cfg.gamma, cfg.delta))
        .collect();
    let mut grads = Gradients::default();
    let (mut total, mut ce, mut l_ffn, mut l_att) = (0.0, 0.0, 0.0, 0.0);
    for (i, r) in results.into_iter().enumerate() {
        let r = r.map_err(|e| e.in_context(format!("step {} sequence {i}", state.step)))?;
        grads.accumulate(&r.grads);
        total += r.total;
        ce += r.ce;
        l_ffn += r.l_ffn;
        l_att += r.l_att;
    }
    let b = batch.len() as f64;
    grads.scale((1.0 / b) as f32);
    if !grads.is_finite() {
        return Err(Error::NonFinite {
            op: "gradient".into(),
            context: format!("step {}", state.step),
        });
    }
    let grad_norm = clip_by_global_norm(&mut grads, cfg.clip_norm);
    let lr = lr_schedule(state.step as usize + 1, cfg);
    state.optimizer.step(state.model.params_mut(), &grads, lr);
    state.step += 1;
    Ok(StepMetrics {
        step: state.step,
        loss: total / b,
        ce: ce / b,
        l_ffn: l_ffn / b,
        l_att: l_att / b,
        lr,
        grad_norm,
    })
}

/// `exp` of the mean next-token cross-entropy over `tokens`, split into consecutive
/// windows whose predicted tokens do not overlap.
pub fn evaluate_perplexity(model: &Model<f32>, tokens: &[usize], context_length: usize) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::Data("evaluation corpus needs at least two tokens".into()));
    }
    if context_length == 0 {
        return Err(Error::Argument("context_length must be positive".into()));
    }
    let starts: Vec<usize> = (0..tokens.len() - 1).step_by(context_length).collect();
    let parts: Vec<Result<(f64, usize)>> = starts
        .par_iter()
        .map(|&s| {
            let end = (s + context_length + 1).min(tokens.len());
            let window = &tokens[s..end];
            let mut g = Graph::new();
            let out = model.forward(&mut g, &window[..window.len() - 1], &ForwardOptions::default())?;
            let ce = g.cross_entropy(out.logits, &window[1..])?;
            Ok((g.value(ce).item() as f64, window.len() - 1))
        })
        .collect();
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in parts {
        let (ce, n) = p?;
        sum += ce * n as f64;
        count += n;
    }
    Ok((sum / count as f64).exp())
}

/// Append-only JSON-lines writer for [`StepMetrics`].
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn append(path: &Path) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { out: BufWriter::new(f) })
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<()> {
        serde_json::to_writer(&mut self.out, m)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}
