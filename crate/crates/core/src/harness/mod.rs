//! Dataset ingestion, evaluation metrics, and experiment orchestration.

pub mod config;
pub mod experiment;
pub mod features;
pub mod manifest;
pub mod metrics;

pub use config::ExperimentConfig;
pub use experiment::{run_experiment, ExperimentOutcome};
pub use features::{load_frame_features, read_frame_feature_header, write_frame_features};
pub use manifest::{load_manifest, DatasetManifest, Modality, Split, VideoEntry, VideoSample};
pub use metrics::{evaluate_accuracy, evaluate_map, EvalReport, MetricKind};
