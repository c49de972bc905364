//! MoEUT: a shared-layer mixture-of-experts Transformer.
//!
//! The crate bundles a small reverse-mode tensor engine ([`tensor`]), the
//! σ-MoE feedforward block ([`moe_ffn`]), SwitchHead attention
//! ([`moe_attention`]), model assembly with layer grouping and layernorm
//! placement plus parameter/MAC accounting ([`model`]), a tiny-corpus
//! training loop ([`training`]), expert-usage analysis ([`analysis`]) and the
//! command-line front end ([`cli`]).

pub mod analysis;
pub mod cli;
pub mod error;
pub mod init;
pub mod model;
pub mod moe_attention;
pub mod moe_ffn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
