//! Benchmark models with known covariance, accuracy metrics, baselines and
//! the replicated experiment runner.

pub mod baselines;
pub mod experiment;
pub mod metrics;
pub mod models;

pub use baselines::{kernel_dcm_baseline, static_baseline, KernelModel, StaticModel};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentReport, MethodSummary, RepMetrics, Stat};
pub use metrics::{losses, median_over_test_points, sparsity_rates};
pub use models::{fixture_test_points, sample_dataset, test_points, true_cov, ModelId, ModelSpec};
