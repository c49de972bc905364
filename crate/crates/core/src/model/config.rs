use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe_attention::AttentionDims;
use crate::moe_ffn::FfnDims;

/// Where layer normalization is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormScheme {
    /// Norms only in front of query/key projections, expert selectors and the classifier.
    Peri,
    /// Norm at the entry of each sublayer plus a final norm.
    Pre,
    /// Norm of the residual sum after each sublayer.
    Post,
}

/// Order in which group members are stacked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    /// `ABAB…`: the whole group is repeated.
    Cyclic,
    /// `AABB…`: each member is repeated consecutively.
    Blocked,
}

/// Block family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// σ-MoE feedforward with SwitchHead attention.
    Moeut,
    /// Dense multi-head attention and a dense two-layer feedforward (baseline).
    Dense,
}

macro_rules! impl_from_str {
    ($ty:ty, $($s:literal => $v:path),+) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($s => Ok($v),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " '{}'"), other
                    ))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let s = match self { $($v => $s,)+ };
                f.write_str(s)
            }
        }
    };
}

impl_from_str!(NormScheme, "peri" => NormScheme::Peri, "pre" => NormScheme::Pre, "post" => NormScheme::Post);
impl_from_str!(Pattern, "cyclic" => Pattern::Cyclic, "blocked" => Pattern::Blocked);
impl_from_str!(Arch, "moeut" => Arch::Moeut, "dense" => Arch::Dense);

fn default_arch() -> Arch {
    Arch::Moeut
}

/// Architecture dimensions. The JSON form uses exactly these field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_arch")]
    pub arch: Arch,
    pub d_model: usize,
    pub n_layers: usize,
    /// Group size: number of distinct layers whose parameters are shared.
    #[serde(rename = "G")]
    pub group_size: usize,
    pub pattern: Pattern,
    #[serde(rename = "H")]
    pub n_heads: usize,
    pub d_head: usize,
    #[serde(rename = "N_A")]
    pub n_att_experts: usize,
    #[serde(rename = "K_A")]
    pub k_att: usize,
    pub d_expert: usize,
    #[serde(rename = "N_E")]
    pub n_experts: usize,
    #[serde(rename = "K")]
    pub k: usize,
    /// Feedforward width of the dense baseline; unused for MoEUT.
    #[serde(default)]
    pub d_ff: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    pub norm_scheme: NormScheme,
    /// Weight of the feedforward balancing loss.
    pub gamma: f64,
    /// Weight of the attention balancing loss.
    pub delta: f64,
}

impl Default for ModelConfig {
    /// Desk-scale MoEUT used by the examples and the training tests.
    fn default() -> Self {
        Self {
            arch: Arch::Moeut,
            d_model: 64,
            n_layers: 4,
            group_size: 2,
            pattern: Pattern::Cyclic,
            n_heads: 2,
            d_head: 32,
            n_att_experts: 4,
            k_att: 2,
            d_expert: 32,
            n_experts: 16,
            k: 4,
            d_ff: 0,
            vocab_size: 256,
            context_length: 256,
            norm_scheme: NormScheme::Peri,
            gamma: 0.01,
            delta: 0.001,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_layers == 0 || self.vocab_size == 0 || self.context_length == 0 {
            return bad("d_model, n_layers, vocab_size and context_length must be positive".into());
        }
        if self.group_size == 0 || self.group_size > self.n_layers {
            return bad(format!(
                "G must be between 1 and n_layers={}, got {}",
                self.n_layers, self.group_size
            ));
        }
        if self.n_layers % self.group_size != 0 {
            return bad(format!(
                "n_layers={} is not divisible by G={}",
                self.n_layers, self.group_size
            ));
        }
        if !(self.gamma.is_finite() && self.delta.is_finite() && self.gamma >= 0.0 && self.delta >= 0.0) {
            return bad("gamma and delta must be finite and non-negative".into());
        }
        match self.arch {
            Arch::Moeut => {
                self.ffn_dims().validate()?;
                self.attention_dims().validate()?;
            }
            Arch::Dense => {
                if self.d_ff == 0 {
                    return bad("dense arch requires d_ff > 0".into());
                }
                if self.n_heads == 0 || self.d_head == 0 {
                    return bad("dense arch requires H > 0 and d_head > 0".into());
                }
            }
        }
        Ok(())
    }

    pub fn ffn_dims(&self) -> FfnDims {
        FfnDims {
            d_model: self.d_model,
            d_expert: self.d_expert,
            n_experts: self.n_experts,
            k: self.k,
        }
    }

    pub fn attention_dims(&self) -> AttentionDims {
        AttentionDims {
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_head: self.d_head,
            n_experts: self.n_att_experts,
            k: self.k_att,
        }
    }

    /// Number of times each group member is applied.
    pub fn repeats(&self) -> usize {
        self.n_layers / self.group_size
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(format!("invalid model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// JSON field names accepted in a config document.
    pub fn field_names() -> &'static [&'static str] {
        &[
            "arch",
            "d_model",
            "n_layers",
            "G",
            "pattern",
            "H",
            "d_head",
            "N_A",
            "K_A",
            "d_expert",
            "N_E",
            "K",
            "d_ff",
            "vocab_size",
            "context_length",
            "norm_scheme",
            "gamma",
            "delta",
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        let back = ModelConfig::from_json_str(&c.to_json_pretty()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn json_uses_symbolic_names() {
        let v: serde_json::Value = serde_json::from_str(&ModelConfig::default().to_json_pretty()).unwrap();
        let obj = v.as_object().unwrap();
        let mut keys: Vec<&str> = obj.keys().map(|s| s.as_str()).collect();
        keys.sort_unstable();
        let mut want = ModelConfig::field_names().to_vec();
        want.sort_unstable();
        assert_eq!(keys, want);
        assert_eq!(obj["norm_scheme"], "peri");
    }

    #[test]
    fn indivisible_layers_rejected() {
        let c = ModelConfig {
            n_layers: 5,
            group_size: 2,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = ModelConfig {
            group_size: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_field_rejected() {
        let mut v: serde_json::Value = serde_json::to_value(ModelConfig::default()).unwrap();
        v["bogus"] = 1.into();
        assert!(ModelConfig::from_json_str(&v.to_string()).is_err());
    }

    #[test]
    fn enum_parsing() {
        assert_eq!("AABB".parse::<Pattern>().ok(), None);
        assert_eq!("blocked".parse::<Pattern>().unwrap(), Pattern::Blocked);
        assert_eq!("Peri".parse::<NormScheme>().unwrap(), NormScheme::Peri);
        assert!("mid".parse::<NormScheme>().is_err());
        assert_eq!(NormScheme::Post.to_string(), "post");
    }
}
