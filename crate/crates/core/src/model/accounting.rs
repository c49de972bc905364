//! Closed-form parameter and multiply-accumulate accounting, the reference
//! model table, and derivation of a MoEUT configuration from a dense baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::config::{Arch, ModelConfig, NormScheme, Pattern};
use super::network::NormSite;

/// Expert width used by every reference MoEUT.
pub const DEFAULT_D_EXPERT: usize = 128;
/// Vocabulary size of the reference models.
pub const REFERENCE_VOCAB: usize = 8000;
pub const REFERENCE_CONTEXT: usize = 1024;
/// Target share of non-embedding parameters spent in attention.
pub const ATTENTION_SHARE: (f64, f64) = (0.10, 0.15);

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub embedding: u64,
    pub classifier: u64,
    pub final_norm: u64,
    /// Per group member.
    pub attention: u64,
    pub ffn: u64,
    pub norms: u64,
    pub group_size: u64,
    pub total: u64,
}

impl ParamBreakdown {
    pub fn non_embedding(&self) -> u64 {
        self.group_size * (self.attention + self.ffn + self.norms)
    }

    /// Share of per-member parameters spent in attention.
    pub fn attention_share(&self) -> f64 {
        self.attention as f64 / (self.attention + self.ffn) as f64
    }
}

/// Exact parameter count of the model built from `cfg` (untied embedding and
/// classifier, classifier bias, affine parameters of every norm site).
pub fn param_breakdown(cfg: &ModelConfig) -> ParamBreakdown {
    let d = cfg.d_model as u64;
    let v = cfg.vocab_size as u64;
    let (attention, ffn) = match cfg.arch {
        Arch::Moeut => (
            cfg.attention_dims().param_count() as u64,
            cfg.ffn_dims().param_count() as u64,
        ),
        Arch::Dense => {
            let hd = (cfg.n_heads * cfg.d_head) as u64;
            (4 * d * hd, 2 * d * cfg.d_ff as u64)
        }
    };
    let norms = 2 * d * NormSite::block_sites(cfg.norm_scheme, cfg.arch).len() as u64;
    let final_norm = if NormSite::has_final(cfg.norm_scheme) { 2 * d } else { 0 };
    let embedding = v * d;
    let classifier = d * v + v;
    let g = cfg.group_size as u64;
    ParamBreakdown {
        embedding,
        classifier,
        final_norm,
        attention,
        ffn,
        norms,
        group_size: g,
        total: embedding + classifier + final_norm + g * (attention + ffn + norms),
    }
}

pub fn count_params(cfg: &ModelConfig) -> u64 {
    param_breakdown(cfg).total
}

/// Forward multiply-accumulates for a whole sequence, split by component.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacBreakdown {
    pub qk_projection: u64,
    /// Value and output projections (active experts only for MoE attention).
    pub value_output: u64,
    /// Attention scores and the weighted sum of values.
    pub attention_matrix: u64,
    /// Expert selector projections.
    pub selectors: u64,
    /// Feedforward channels (active experts only for MoE).
    pub ffn: u64,
    pub classifier: u64,
    pub total: u64,
}

/// Forward MACs for a sequence of `seq_len` tokens. Nonlinearities and norms are
/// not counted; attention score and mixing terms use the full length per token.
pub fn mac_breakdown(cfg: &ModelConfig, seq_len: usize) -> MacBreakdown {
    let t = seq_len as u64;
    let l = cfg.n_layers as u64;
    let d = cfg.d_model as u64;
    let h = cfg.n_heads as u64;
    let dh = cfg.d_head as u64;
    let per_token_layer_qk = 2 * h * d * dh;
    let per_token_layer_att = 2 * h * t * dh;
    let (vo, sel, ffn) = match cfg.arch {
        Arch::Moeut => {
            let ka = cfg.k_att as u64;
            let na = cfg.n_att_experts as u64;
            let vo = 2 * h * ka * d * dh;
            let sel = 2 * h * d * na + d * cfg.n_experts as u64;
            let ffn = 2 * cfg.k as u64 * cfg.d_expert as u64 * d;
            (vo, sel, ffn)
        }
        Arch::Dense => (2 * h * d * dh, 0, 2 * d * cfg.d_ff as u64),
    };
    let mut b = MacBreakdown {
        qk_projection: t * l * per_token_layer_qk,
        value_output: t * l * vo,
        attention_matrix: t * l * per_token_layer_att,
        selectors: t * l * sel,
        ffn: t * l * ffn,
        classifier: t * d * cfg.vocab_size as u64,
        total: 0,
    };
    b.total = b.qk_projection + b.value_output + b.attention_matrix + b.selectors + b.ffn + b.classifier;
    b
}

pub fn count_macs(cfg: &ModelConfig, seq_len: usize) -> u64 {
    mac_breakdown(cfg, seq_len).total
}

/// Kind of a reference table row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowKind {
    Dense,
    Moeut,
    SigmaMoe,
}

/// One row of the reference hyperparameter table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceRow {
    pub kind: RowKind,
    /// Reported size in millions of parameters.
    pub reported_millions: f64,
    pub n_layers: usize,
    pub group_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_att_experts: usize,
    pub d_head: usize,
    pub n_experts: usize,
    pub k: usize,
    pub warmup_steps: usize,
    pub clip_norm: f64,
}

const fn row(
    kind: RowKind,
    reported_millions: f64,
    n_layers: usize,
    group_size: usize,
    d_model: usize,
    d_ff: usize,
    n_heads: usize,
    n_att_experts: usize,
    d_head: usize,
    n_experts: usize,
    k: usize,
    warmup_steps: usize,
    clip_norm: f64,
) -> ReferenceRow {
    ReferenceRow {
        kind,
        reported_millions,
        n_layers,
        group_size,
        d_model,
        d_ff,
        n_heads,
        n_att_experts,
        d_head,
        n_experts,
        k,
        warmup_steps,
        clip_norm,
    }
}

use RowKind::{Dense as D, Moeut as M, SigmaMoe as S};

/// Reference configurations (dense baselines, MoEUT, and non-shared σ-MoE).
pub const REFERENCE_ROWS: &[ReferenceRow] = &[
    row(D, 45.0, 16, 16, 412, 2053, 10, 1, 41, 0, 0, 0, 0.1),
    row(M, 44.0, 16, 2, 412, 0, 4, 8, 82, 155, 12, 0, 0.1),
    row(S, 44.0, 16, 16, 412, 0, 4, 1, 82, 17, 12, 0, 0.1),
    row(D, 126.0, 16, 16, 768, 3072, 16, 1, 48, 0, 0, 4000, 0.25),
    row(M, 126.0, 18, 2, 768, 0, 4, 10, 96, 254, 12, 4000, 0.25),
    row(S, 126.0, 18, 18, 768, 0, 4, 1, 96, 26, 12, 4000, 0.25),
    row(D, 244.0, 18, 18, 1024, 4110, 16, 1, 64, 0, 0, 4000, 0.25),
    row(M, 243.0, 18, 2, 1024, 0, 4, 10, 128, 387, 16, 4000, 0.25),
    row(S, 244.0, 18, 18, 1024, 0, 4, 1, 128, 40, 16, 4000, 0.25),
    row(D, 319.0, 24, 24, 1024, 4110, 16, 1, 64, 0, 0, 4000, 0.25),
    row(M, 318.0, 24, 3, 1024, 0, 4, 10, 128, 338, 16, 4000, 0.25),
    row(S, 320.0, 24, 24, 1024, 0, 4, 1, 128, 40, 16, 4000, 0.25),
    row(D, 729.0, 36, 36, 1280, 5120, 20, 1, 64, 0, 0, 4000, 0.25),
    row(M, 727.0, 36, 4, 1280, 0, 5, 13, 128, 467, 20, 4000, 0.25),
    row(S, 731.0, 36, 36, 1280, 0, 5, 1, 128, 50, 20, 4000, 0.25),
    row(D, 1044.0, 36, 36, 1536, 6144, 24, 1, 64, 0, 0, 4000, 0.25),
    row(M, 1040.0, 36, 4, 1536, 0, 6, 12, 128, 565, 24, 4000, 0.25),
];

impl ReferenceRow {
    pub fn reported_params(&self) -> f64 {
        self.reported_millions * 1e6
    }

    /// Short identifier such as `moeut_244M`.
    pub fn name(&self) -> String {
        let prefix = match self.kind {
            RowKind::Dense => "dense",
            RowKind::Moeut => "moeut",
            RowKind::SigmaMoe => "sigma_moe",
        };
        format!("{prefix}_{}M", self.reported_millions as u64)
    }

    pub fn config(&self, vocab_size: usize) -> ModelConfig {
        let (arch, norm_scheme) = match self.kind {
            RowKind::Dense => (Arch::Dense, NormScheme::Pre),
            RowKind::Moeut => (Arch::Moeut, NormScheme::Peri),
            RowKind::SigmaMoe => (Arch::Moeut, NormScheme::Pre),
        };
        let is_moe = self.kind != RowKind::Dense;
        ModelConfig {
            arch,
            d_model: self.d_model,
            n_layers: self.n_layers,
            group_size: self.group_size,
            pattern: Pattern::Cyclic,
            n_heads: self.n_heads,
            d_head: self.d_head,
            n_att_experts: self.n_att_experts,
            k_att: if is_moe { self.n_att_experts.min(2) } else { 1 },
            d_expert: if is_moe { DEFAULT_D_EXPERT } else { 0 },
            n_experts: self.n_experts,
            k: self.k,
            d_ff: self.d_ff,
            vocab_size,
            context_length: REFERENCE_CONTEXT,
            norm_scheme,
            gamma: 0.01,
            delta: 0.001,
        }
    }
}

/// Dimensions of a dense baseline Transformer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseSpec {
    pub d_model: usize,
    pub n_layers: usize,
    #[serde(rename = "H")]
    pub n_heads: usize,
    pub d_head: usize,
    /// Defaults to `4·d_model` when zero.
    #[serde(default)]
    pub d_ff: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
}

fn default_vocab() -> usize {
    REFERENCE_VOCAB
}

impl DenseSpec {
    pub fn d_ff_or_default(&self) -> usize {
        if self.d_ff == 0 {
            4 * self.d_model
        } else {
            self.d_ff
        }
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            arch: Arch::Dense,
            d_model: self.d_model,
            n_layers: self.n_layers,
            group_size: self.n_layers,
            pattern: Pattern::Cyclic,
            n_heads: self.n_heads,
            d_head: self.d_head,
            n_att_experts: 1,
            k_att: 1,
            d_expert: 0,
            n_experts: 0,
            k: 0,
            d_ff: self.d_ff_or_default(),
            vocab_size: self.vocab_size,
            context_length: REFERENCE_CONTEXT,
            norm_scheme: NormScheme::Pre,
            gamma: 0.01,
            delta: 0.001,
        }
    }
}

/// How a derived configuration was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Derivation {
    /// The dense dimensions match a reference row, whose MoEUT settings are returned verbatim.
    ReferenceRow,
    /// Solved from the sizing rules.
    Rules,
}

fn reference_match(dense: &DenseSpec, target: f64) -> Option<ModelConfig> {
    let baselines = REFERENCE_ROWS.iter().filter(|r| r.kind == RowKind::Dense);
    for (i, b) in baselines.enumerate() {
        if b.d_model != dense.d_model || b.n_heads != dense.n_heads || b.d_head != dense.d_head {
            continue;
        }
        let Some(m) = REFERENCE_ROWS
            .iter()
            .filter(|r| r.kind == RowKind::Moeut)
            .nth(i)
        else {
            continue;
        };
        if dense.n_layers != b.n_layers && dense.n_layers != m.n_layers {
            continue;
        }
        if ((target - m.reported_params()) / m.reported_params()).abs() > 0.03 {
            continue;
        }
        return Some(m.config(dense.vocab_size));
    }
    None
}

/// Group size rule: 2 below 300M parameters, 3 up to 500M, 4 beyond, reduced to
/// the largest divisor of `n_layers` not above that value.
pub fn group_size_for(target_params: f64, n_layers: usize) -> usize {
    let want: usize = if target_params < 300e6 {
        2
    } else if target_params < 500e6 {
        3
    } else {
        4
    };
    (1..=want.min(n_layers)).rev().find(|g| n_layers % g == 0).unwrap_or(1)
}

/// Sizes a MoEUT from a dense baseline.
///
/// Heads are quartered and doubled in width, `K_A = 2`, `d_expert = 128`,
/// `K = 2·d_model/d_expert`. `N_A` is the smallest count putting at least 10% of
/// the per-layer parameters into attention, and `N_E` fills the remaining budget
/// up to `target_params` (default: the dense model's own count). When the dense
/// dimensions match a reference row the reference MoEUT is returned unchanged.
pub fn build_config_from_dense(dense: &DenseSpec, target_params: Option<f64>) -> Result<(ModelConfig, Derivation)> {
    if dense.d_model == 0 || dense.n_layers == 0 || dense.n_heads == 0 || dense.d_head == 0 {
        return Err(Error::Config("dense dimensions must be positive".into()));
    }
    let target = target_params.unwrap_or_else(|| count_params(&dense.config()) as f64);
    if !(target.is_finite() && target > 0.0) {
        return Err(Error::Config(format!("invalid target parameter count {target}")));
    }
    if let Some(cfg) = reference_match(dense, target) {
        return Ok((cfg, Derivation::ReferenceRow));
    }
    Ok((derive_by_rules(dense, target)?, Derivation::Rules))
}

/// The rule-based solver alone (no reference lookup).
pub fn derive_by_rules(dense: &DenseSpec, target: f64) -> Result<ModelConfig> {
    let d = dense.d_model;
    let n_heads = ((dense.n_heads as f64) / 4.0).round().max(1.0) as usize;
    let d_head = 2 * dense.d_head;
    let d_expert = DEFAULT_D_EXPERT;
    let k = ((2 * d) as f64 / d_expert as f64).round().max(1.0) as usize;
    let group_size = group_size_for(target, dense.n_layers);
    let mut cfg = ModelConfig {
        arch: Arch::Moeut,
        d_model: d,
        n_layers: dense.n_layers,
        group_size,
        pattern: Pattern::Cyclic,
        n_heads,
        d_head,
        n_att_experts: 2,
        k_att: 2,
        d_expert,
        n_experts: k,
        k,
        d_ff: 0,
        vocab_size: dense.vocab_size,
        context_length: REFERENCE_CONTEXT,
        norm_scheme: NormScheme::Peri,
        gamma: 0.01,
        delta: 0.001,
    };
    let per_expert = (2 * d_expert * d + d) as f64;
    for n_att in 2..=4096usize {
        cfg.n_att_experts = n_att;
        cfg.n_experts = 1;
        let base = param_breakdown(&cfg);
        let fixed = (base.embedding + base.classifier + base.final_norm) as f64;
        let per_member_budget = (target - fixed) / group_size as f64 - (base.attention + base.norms) as f64;
        let n_experts = (per_member_budget / per_expert).round();
        if n_experts < k as f64 {
            return Err(Error::Config(format!(
                "target of {target:.0} parameters leaves room for only {n_experts} experts (K={k})"
            )));
        }
        cfg.n_experts = n_experts as usize;
        if param_breakdown(&cfg).attention_share() >= ATTENTION_SHARE.0 {
            cfg.validate()?;
            return Ok(cfg);
        }
    }
    Err(Error::Config("could not reach the attention parameter share".into()))
}
