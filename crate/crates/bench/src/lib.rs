//! Dataset ingestion, batch benchmarking, and diagnostics around the
//! block-difference attack in `corrattack_core`.

pub mod config;
pub mod dataset;
pub mod error;
pub mod probe;
pub mod report;
pub mod runner;

pub use config::{BenchConfig, ConfigError, DatasetSource, OracleSource, SyntheticKind};
pub use dataset::{load_dataset, save_dataset, synthetic_dataset, Ingest, Sample};
pub use error::BenchError;
pub use probe::{bo_rank_probe, ProbeConfig, RankTrace, RewardField};
pub use report::{BenchmarkReport, ImageRecord};
pub use runner::{random_block_baseline, run_benchmark, run_benchmark_to, ModelSource};
