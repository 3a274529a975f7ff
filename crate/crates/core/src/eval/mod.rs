//! Metrics, code-distribution exports, latency measurement and the
//! hyper-parameter sweep driver.

mod distribution;
mod export;
mod latency;
mod metrics;
mod sweep;

pub use distribution::{code_distribution, CodeDistributionGrid};
pub use export::{ablation_csv, fmt_sig, ABLATION_HEADER};
pub use latency::{
    latency_harness, latency_harness_with, LatencyRow, LatencyTable, LatencyWorkload, PipelineWorkload,
    LATENCY_HEADER,
};
pub use metrics::{auc, logloss, metric_pair, MetricPair};
pub use sweep::{sweep, sweep_points, PointStatus, SweepEntry, SweepOutcome, SweepPoint, SWEEP_HEADER};
