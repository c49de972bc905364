//! Model assembly: configuration, layer grouping, normalization placement,
//! the forward pass, and parameter/MAC accounting.

pub mod accounting;
mod config;
mod network;
mod schedule;

pub use accounting::{
    build_config_from_dense, count_macs, count_params, mac_breakdown, param_breakdown, DenseSpec, Derivation,
    MacBreakdown, ParamBreakdown, ReferenceRow, RowKind, REFERENCE_ROWS, REFERENCE_VOCAB,
};
pub use config::{Arch, ModelConfig, NormScheme, Pattern};
pub use network::{
    BlockOutput, BlockParams, DenseHeadParams, ForwardOptions, ForwardOutput, LossOutput, MemberParams, Model,
    NormParams, NormSite, TraceMode, LAYER_NORM_EPS,
};
pub use schedule::{build_schedule, LayerSchedule};
