//! Whole-volume inference, segmentation metrics, and the domain probe.

pub mod infer;
pub mod metrics;
pub mod probe;
pub mod report;

pub use infer::{dense_infer, dense_infer_logits};
pub use metrics::{
    confusion_counts, metrics_csv, score_case, segmentation_metrics, summarize, CaseMetrics,
    ConfusionCounts, SegMetrics,
};
pub use probe::{probe_domain_accuracy, run_probe, train_fresh_discriminator, FreshProbe, ProbeConfig};
pub use report::{evaluate, EvalConfig, EvalOutput};
