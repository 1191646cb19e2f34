//! Variable-length video classification on precomputed frame features.
//!
//! The pipeline encodes local motion descriptors into frame-level Fisher
//! vectors ([`fisher`]), compresses them with supervised feature merging
//! ([`featmerge`]), and classifies whole videos with a trainable encoding
//! layer followed by temporal pyramid pooling and a softmax classifier
//! ([`tppnet`]). Appearance and motion streams can be combined before or
//! after the network ([`fusion`]), and [`harness`] wires everything into
//! reproducible experiments.

pub mod codec;
pub mod error;
pub mod featmerge;
pub mod fisher;
pub mod fusion;
pub mod gmm;
pub mod harness;
pub mod numkit;
pub mod synth;
pub mod tppnet;

pub use error::{Error, Result};
pub use featmerge::MergeMap;
pub use fisher::{FisherVector, TrajectoryRecord};
pub use fusion::{FusionWeights, SvmModel};
pub use gmm::{GmmModel, KmeansResult};
pub use harness::{DatasetManifest, EvalReport, VideoSample};
pub use numkit::Matrix;
pub use tppnet::{NetParams, PoolOp, PyramidSpec, TrainConfig};
