//! Runs: configuration, data, the training loop, snapshots and gradient
//! verification.

pub mod config;
pub mod data;
pub mod gradcheck;
pub mod snapshot;
pub mod train;

pub use config::{DatasetSpec, FeedbackConfig, TrainConfig, DATA_ROOT_ENV};
pub use data::{gen_blobs, load_dataset, load_idx, Dataset, Splits};
pub use gradcheck::{gradcheck, Engine, FlipSign, GradcheckReport, GradientSource, Gradients};
pub use snapshot::{diagnose, read_manifest, write_snapshot};
pub use train::{run, run_replicas, train, MetricRow, RunResult, Split, Summary, Trainer, CSV_HEADER};
