//! Evaluation protocol: clip-averaged predictions, per-view metrics and cross-view aggregates.

mod metrics;
mod predict;
mod report;

pub use metrics::{argmax, random_baseline, rank_of, topk_accuracy, Baseline, ConfusionMatrix};
pub use predict::{mean_of, predict_video, VideoPrediction};
pub use report::{
    evaluate, export_csv, export_embeddings, report_from_predictions, split_common_rare, CrossView,
    EvalReport, ExportRow, ViewMetrics,
};
