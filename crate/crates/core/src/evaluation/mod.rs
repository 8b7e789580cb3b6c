//! Metrics and experiment procedures.

mod episodes;
mod f1;
mod generative;
mod report;
mod sweep;

pub use episodes::{batch_at, eval_samples, run_episodes, Detections, EpisodeRun, KlDecomposition};
pub use f1::{boundary_f1, pooled_f1, BoundaryCounts, BoundaryScore};
pub use generative::{
    disentanglement_entropy, empirical_entropy, event_prediction_accuracy, level_entropy, prime,
    rollout, update_rate, DisentanglementReport, EventPrediction, RolloutOptions,
};
pub use report::{
    config_digest, write_csv, write_metrics_csv, write_report_json, MetricRecord, Recorder,
};
pub use sweep::{
    cell_config, cu_sensitivity_sweep, Marginal, SweepAxis, SweepCell, SweepGrid, SweepTable,
};
