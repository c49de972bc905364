//! Autoregressive language-model training on small corpora.

mod checkpoint;
mod data;
mod optim;
mod schedule;
mod trainer;
mod vocab;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use data::{read_corpus_text, synthetic_grammar_corpus, unigram_entropy, Corpus};
pub use optim::{clip_by_global_norm, AdamW};
pub use schedule::{lr_schedule, FINAL_LR_FRACTION};
pub use trainer::{evaluate_perplexity, train_step, StepMetrics, TrainState, MetricsWriter};
pub use vocab::Vocabulary;

/// Optimization settings. The JSON form uses these field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Tokens fed to the model per sequence (each window holds one extra target token).
    pub context_length: usize,
    pub steps: usize,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clipping threshold κ.
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            context_length: 256,
            steps: 500,
            lr_peak: 2e-3,
            warmup_steps: 50,
            clip_norm: 0.25,
            weight_decay: 0.01,
            gamma: 0.01,
            delta: 0.001,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 || self.context_length == 0 {
            return bad("batch_size and context_length must be positive");
        }
        if !(self.lr_peak.is_finite() && self.lr_peak > 0.0) {
            return bad("lr_peak must be positive");
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if self.steps < self.warmup_steps {
            return bad("steps must be at least warmup_steps");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.gamma.is_finite() && self.delta.is_finite() && self.gamma >= 0.0 && self.delta >= 0.0) {
            return bad("gamma and delta must be finite and non-negative");
        }
        Ok(())
    }
}
