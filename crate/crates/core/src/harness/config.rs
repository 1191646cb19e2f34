//! Experiment configuration (`tpp run --config experiment.json`).
//!
//! One root `seed` drives the whole run. Each stage draws its own seed as
//! `derive_seed(root, stream)` with a fixed stream number per stage (see
//! [`Stage::seed_stream`]), so stages reproduce independently of which
//! other stages ran.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::manifest::Modality;
use super::metrics::MetricKind;
use crate::error::{Error, Result};
use crate::fusion::BaselinePool;
use crate::gmm::{DEFAULT_EM_ITERS, DEFAULT_EM_TOL};
use crate::numkit::derive_seed;
use crate::tppnet::{PyramidSpec, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    FitGmm,
    FitMerger,
    EncodeMotion,
    Train,
    Eval,
    Baseline,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::FitGmm => "fit-gmm",
            Stage::FitMerger => "fit-merger",
            Stage::EncodeMotion => "encode-motion",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Baseline => "baseline",
        }
    }

    pub fn seed_stream(self) -> u64 {
        match self {
            Stage::FitGmm => 1,
            Stage::FitMerger => 2,
            Stage::EncodeMotion => 3,
            Stage::Train => 4,
            Stage::Eval => 5,
            Stage::Baseline => 6,
        }
    }
}

/// Network input. `LateFusion` trains an appearance and a motion network
/// and averages their outputs with `w_appearance`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetworkMode {
    Appearance,
    Motion,
    EarlyFusion,
    LateFusion,
}

impl NetworkMode {
    /// Modalities that each get their own network.
    pub fn streams(self) -> Vec<Modality> {
        match self {
            NetworkMode::Appearance => vec![Modality::Appearance],
            NetworkMode::Motion => vec![Modality::Motion],
            NetworkMode::EarlyFusion => vec![Modality::EarlyFusion],
            NetworkMode::LateFusion => vec![Modality::Appearance, Modality::Motion],
        }
    }

    pub fn needs_motion(self) -> bool {
        !matches!(self, NetworkMode::Appearance)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmStageConfig {
    pub components: usize,
    pub max_iters: usize,
    pub tol: f64,
    /// Upper bound on descriptors sampled from the training split.
    pub max_descriptors: usize,
}

impl Default for GmmStageConfig {
    fn default() -> Self {
        Self { components: 256, max_iters: DEFAULT_EM_ITERS, tol: DEFAULT_EM_TOL, max_descriptors: 100_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergerStageConfig {
    pub k: usize,
    /// Frames sampled per training video to build the merging statistics.
    pub frames_per_video: usize,
}

impl Default for MergerStageConfig {
    fn default() -> Self {
        Self { k: 4096, frames_per_video: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmStageConfig {
    pub lambda: f64,
    pub epochs: usize,
}

impl Default for SvmStageConfig {
    fn default() -> Self {
        Self { lambda: 1e-4, epochs: 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMode {
    /// Appearance, average pooling.
    Aap,
    /// Appearance, temporal pyramid pooling.
    Atp,
    /// Trajectory motion features, average pooling.
    Tap,
    /// Trajectory motion features, temporal pyramid pooling.
    Ttp,
}

impl BaselineMode {
    pub fn modality(self) -> Modality {
        match self {
            BaselineMode::Aap | BaselineMode::Atp => Modality::Appearance,
            BaselineMode::Tap | BaselineMode::Ttp => Modality::Motion,
        }
    }

    pub fn pooling(self, pyramid: PyramidSpec) -> BaselinePool {
        match self {
            BaselineMode::Aap | BaselineMode::Tap => BaselinePool::Average,
            BaselineMode::Atp | BaselineMode::Ttp => BaselinePool::Pyramid(pyramid),
        }
    }
}

impl std::str::FromStr for BaselineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_owned()))
            .map_err(|_| Error::Config(format!("unknown baseline mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineStageConfig {
    pub mode: BaselineMode,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_svm_epochs")]
    pub epochs: usize,
}

impl BaselineStageConfig {
    pub fn svm(&self) -> SvmStageConfig {
        SvmStageConfig { lambda: self.lambda, epochs: self.epochs }
    }
}

fn default_lambda() -> f64 {
    SvmStageConfig::default().lambda
}

fn default_svm_epochs() -> usize {
    SvmStageConfig::default().epochs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Relative to the config file.
    pub manifest: PathBuf,
    /// Relative to the config file.
    pub out_dir: PathBuf,
    pub seed: u64,
    pub stages: Vec<Stage>,
    pub network: NetworkMode,
    pub metric: MetricKind,
    #[serde(default)]
    pub gmm: GmmStageConfig,
    /// Absent means motion features keep the full Fisher vector length.
    #[serde(default)]
    pub merger: Option<MergerStageConfig>,
    /// `seed` inside this block is ignored; the stage seed is used instead.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_w_appearance")]
    pub w_appearance: f64,
    /// When set, network scores are averaged with a linear SVM on
    /// whole-video Fisher vectors.
    #[serde(default)]
    pub score_fusion: Option<SvmStageConfig>,
    #[serde(default)]
    pub baseline: Option<BaselineStageConfig>,
    #[serde(skip)]
    base_dir: PathBuf,
}

fn default_w_appearance() -> f64 {
    1.0 / 3.0
}

impl ExperimentConfig {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("line {} column {}: {e}", e.line(), e.column())))?;
        cfg.base_dir = base_dir.into();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().map(Path::to_path_buf).unwrap_or_default())
    }

    fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.stages.is_empty() {
            return Err(Error::Config("no stages listed".into()));
        }
        let mut sorted = self.stages.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.stages.len() {
            return Err(Error::Config("a stage is listed twice".into()));
        }
        if !(0.0..=1.0).contains(&self.w_appearance) {
            return Err(Error::Config("w_appearance must lie in [0, 1]".into()));
        }
        if self.stages.contains(&Stage::Baseline) && self.baseline.is_none() {
            return Err(Error::Config("stage `baseline` needs a `baseline` block".into()));
        }
        if self.stages.contains(&Stage::FitMerger) && self.merger.is_none() {
            return Err(Error::Config("stage `fit-merger` needs a `merger` block".into()));
        }
        Ok(())
    }

    /// Stages in pipeline order.
    pub fn ordered_stages(&self) -> Vec<Stage> {
        let mut s = self.stages.clone();
        s.sort();
        s
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        derive_seed(self.seed, stage.seed_stream())
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.base_dir.join(&self.manifest)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.base_dir.join(&self.out_dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"{
        "manifest": "data/manifest.json",
        "out_dir": "run",
        "seed": 3,
        "stages": ["train", "eval"],
        "network": "appearance",
        "metric": "accuracy",
        "train": {"hidden_dim": 8, "pyramid": {"segments": 5}}
    }"#;

    #[test]
    fn parses_with_defaults() {
        let c = ExperimentConfig::parse(BASIC, "/exp").unwrap();
        assert_eq!(c.manifest_path(), PathBuf::from("/exp/data/manifest.json"));
        assert_eq!(c.train.pyramid.blocks() * c.train.hidden_dim, 48);
        assert_eq!(c.train.momentum, 0.9);
        assert!((c.w_appearance - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.gmm.components, 256);
        assert_ne!(c.stage_seed(Stage::Train), c.stage_seed(Stage::FitGmm));
    }

    #[test]
    fn rejects_inconsistent_configs() {
        let dup = BASIC.replace(r#"["train", "eval"]"#, r#"["train", "train"]"#);
        assert!(ExperimentConfig::parse(&dup, ".").is_err());
        let unknown = BASIC.replace("\"seed\"", "\"sed\"");
        assert!(ExperimentConfig::parse(&unknown, ".").is_err());
        let base = BASIC.replace(r#"["train", "eval"]"#, r#"["baseline"]"#);
        assert!(ExperimentConfig::parse(&base, ".").is_err());
    }

    #[test]
    fn baseline_modes() {
        let m: BaselineMode = "ttp".parse().unwrap();
        assert_eq!(m.modality(), Modality::Motion);
        assert!("xyz".parse::<BaselineMode>().is_err());
    }
}
