//! Synthetic data, training, evaluation, benchmarking and persistence.

pub mod bench;
pub mod checkpoint;
pub mod dataset;
pub mod metrics;
pub mod train;

pub use bench::{benchmark_mixing, BenchmarkReport, ScalingFit};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use dataset::{generate_synthetic_dataset, synthesize, Dataset, DatasetManifest};
pub use metrics::{cs_metric, mae_metric, EpochStats, MetricsReport};
pub use train::{run_ablation, train_pipeline, AblationRow, Evaluation, RunConfig, TrainedModel};
