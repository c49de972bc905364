//! Expert-usage diagnostics over recorded routing decisions.

mod metrics;
pub mod trace;

pub use metrics::{
    column_selection_iou, expert_layer_histogram, expert_order, layer_position_score, residual_update_norms,
    token_expert_diversity, token_layer_specialization, write_diversity_csv, write_expert_order_csv,
    write_specialization_csv, write_update_norms_csv, ExpertLayerHistogram, IouMatrix, LayerUpdateNorm,
    TokenSpecialization,
};
pub use trace::{collect_trace, stream_jsonl, SelectionRecord, SelectionTrace};
