//! JSON dataset manifests and per-video sample loading.
//!
//! Relative paths inside a manifest resolve against the manifest's own
//! directory.

use std::borrow::Cow;
use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::features::load_frame_features;
use crate::error::{Error, Result};
use crate::fusion::early_fuse;
use crate::numkit::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoEntry {
    pub id: String,
    pub labels: Vec<String>,
    pub frame_feature_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory_path: Option<PathBuf>,
    /// Written by motion encoding; holds a TPPF file of frame-level motion
    /// features.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion_feature_path: Option<PathBuf>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub videos: Vec<VideoEntry>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(classes: Vec<String>, videos: Vec<VideoEntry>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self { classes, videos, base_dir: base_dir.into() };
        m.validate()?;
        Ok(m)
    }

    /// Parses and validates structure; file paths are not checked.
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut m: DatasetManifest =
            serde_json::from_str(text).map_err(|e| Error::Manifest(format!("line {} column {}: {e}", e.line(), e.column())))?;
        m.base_dir = base_dir.into();
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Manifest("`classes` is empty".into()));
        }
        let mut names = HashSet::new();
        for c in &self.classes {
            if !names.insert(c.as_str()) {
                return Err(Error::Manifest(format!("duplicate class `{c}`")));
            }
        }
        let mut ids = HashSet::new();
        for v in &self.videos {
            if !ids.insert(v.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate video id `{}`", v.id)));
            }
            if v.labels.is_empty() {
                return Err(Error::Manifest(format!("video `{}` has no labels", v.id)));
            }
            if let Some(l) = v.labels.iter().find(|l| !names.contains(l.as_str())) {
                return Err(Error::Manifest(format!("video `{}` has unknown label `{l}`", v.id)));
            }
        }
        Ok(())
    }

    /// Fails if any referenced file is missing.
    pub fn check_paths(&self) -> Result<()> {
        for v in &self.videos {
            let paths = std::iter::once(&v.frame_feature_path)
                .chain(v.trajectory_path.as_ref())
                .chain(v.motion_feature_path.as_ref());
            for p in paths {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::Manifest(format!("video `{}`: missing file {}", v.id, full.display())));
                }
            }
        }
        Ok(())
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn label_indices(&self, v: &VideoEntry) -> Vec<usize> {
        v.labels.iter().map(|l| self.class_index(l).expect("validated label")).collect()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &VideoEntry> {
        self.videos.iter().filter(move |v| v.split == split)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Loads the modalities `modality` needs for one video.
    pub fn load_sample(&self, v: &VideoEntry, modality: Modality) -> Result<VideoSample> {
        let appearance = match modality {
            Modality::Appearance | Modality::EarlyFusion => Some(load_frame_features(&self.resolve(&v.frame_feature_path))?),
            Modality::Motion => None,
        };
        let motion = match modality {
            Modality::Motion | Modality::EarlyFusion => {
                let p = v.motion_feature_path.as_ref().ok_or_else(|| Error::Dependency {
                    stage: "load motion features".into(),
                    missing: format!("motion_feature_path for video `{}` (run encode-motion first)", v.id),
                })?;
                Some(load_frame_features(&self.resolve(p))?)
            }
            Modality::Appearance => None,
        };
        VideoSample::new(v.id.clone(), appearance, motion, self.label_indices(v))
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m = DatasetManifest::parse(&text, base)?;
    m.check_paths()?;
    Ok(m)
}

/// Which frame features feed the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Appearance,
    Motion,
    EarlyFusion,
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "appearance" => Ok(Modality::Appearance),
            "motion" => Ok(Modality::Motion),
            "early-fusion" => Ok(Modality::EarlyFusion),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub appearance: Option<Matrix>,
    pub motion: Option<Matrix>,
    pub labels: Vec<usize>,
}

impl VideoSample {
    pub fn new(id: String, appearance: Option<Matrix>, motion: Option<Matrix>, labels: Vec<usize>) -> Result<Self> {
        match (&appearance, &motion) {
            (None, None) => return Err(Error::Config(format!("video `{id}` has no modality"))),
            (Some(a), Some(m)) if a.rows() != m.rows() => {
                return Err(Error::shape(
                    "VideoSample",
                    format!("video `{id}`: appearance has {} frames, motion has {}", a.rows(), m.rows()),
                ))
            }
            _ => {}
        }
        if labels.is_empty() {
            return Err(Error::Label(format!("video `{id}` has no labels")));
        }
        Ok(Self { id, appearance, motion, labels })
    }

    pub fn frames(&self) -> usize {
        self.appearance.as_ref().or(self.motion.as_ref()).map_or(0, Matrix::rows)
    }

    /// Training label: the first listed one.
    pub fn primary_label(&self) -> usize {
        self.labels[0]
    }

    pub fn input(&self, modality: Modality) -> Result<Cow<'_, Matrix>> {
        let missing = |what: &str| Error::Config(format!("video `{}` lacks {what} features", self.id));
        match modality {
            Modality::Appearance => self.appearance.as_ref().map(Cow::Borrowed).ok_or_else(|| missing("appearance")),
            Modality::Motion => self.motion.as_ref().map(Cow::Borrowed).ok_or_else(|| missing("motion")),
            Modality::EarlyFusion => {
                let a = self.appearance.as_ref().ok_or_else(|| missing("appearance"))?;
                let m = self.motion.as_ref().ok_or_else(|| missing("motion"))?;
                early_fuse(a, m).map(Cow::Owned)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::features::write_frame_features;

    const MINIMAL: &str = r#"{
        "classes": ["run", "jump"],
        "videos": [
            {"id": "v1", "labels": ["jump"], "frame_feature_path": "v1.tppf", "split": "train"}
        ]
    }"#;

    #[test]
    fn minimal_manifest_round_trips() {
        let m = DatasetManifest::parse(MINIMAL, "/data").unwrap();
        assert_eq!(m.label_indices(&m.videos[0]), vec![1]);
        assert_eq!(m.resolve(Path::new("v1.tppf")), PathBuf::from("/data/v1.tppf"));
        let again = DatasetManifest::parse(&m.to_json().unwrap(), "/data").unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn rejects_unknown_label_and_duplicates() {
        let bad = MINIMAL.replace(r#"["jump"]"#, r#"["swim"]"#);
        let err = DatasetManifest::parse(&bad, ".").unwrap_err();
        assert!(err.to_string().contains("`v1`") && err.to_string().contains("swim"), "{err}");

        let dup = r#"{"classes": ["a"], "videos": [
            {"id": "x", "labels": ["a"], "frame_feature_path": "x", "split": "train"},
            {"id": "x", "labels": ["a"], "frame_feature_path": "y", "split": "test"}]}"#;
        assert!(DatasetManifest::parse(dup, ".").unwrap_err().to_string().contains("duplicate video id"));

        let err = DatasetManifest::parse("{\"classes\": [\"a\"],\n \"videos\": 3}", ".").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn split_partition_and_paths() {
        let dir = tempfile::tempdir().unwrap();
        let text = r#"{"classes": ["a", "b"], "videos": [
            {"id": "x", "labels": ["a"], "frame_feature_path": "x.tppf", "split": "train"},
            {"id": "y", "labels": ["b", "a"], "frame_feature_path": "y.tppf", "split": "test"},
            {"id": "z", "labels": ["b"], "frame_feature_path": "z.tppf", "split": "train"}]}"#;
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, text).unwrap();
        assert!(load_manifest(&path).unwrap_err().to_string().contains("missing file"));
        for id in ["x", "y", "z"] {
            write_frame_features(&dir.path().join(format!("{id}.tppf")), &Matrix::zeros(4, 3)).unwrap();
        }
        let m = load_manifest(&path).unwrap();
        let train: Vec<&str> = m.split(Split::Train).map(|v| v.id.as_str()).collect();
        let test: Vec<&str> = m.split(Split::Test).map(|v| v.id.as_str()).collect();
        assert_eq!((train, test), (vec!["x", "z"], vec!["y"]));
        let s = m.load_sample(&m.videos[1], Modality::Appearance).unwrap();
        assert_eq!((s.frames(), s.labels.clone()), (4, vec![1, 0]));
        assert_eq!(m.load_sample(&m.videos[1], Modality::Motion).unwrap_err().kind(), "dependency");
    }

    #[test]
    fn sample_inputs() {
        let a = Matrix::zeros(3, 2);
        let m = Matrix::new(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let s = VideoSample::new("v".into(), Some(a), Some(m), vec![0]).unwrap();
        assert_eq!(s.input(Modality::EarlyFusion).unwrap().shape(), (3, 3));
        assert!(VideoSample::new("v".into(), None, None, vec![0]).is_err());
        assert!(VideoSample::new("v".into(), Some(Matrix::zeros(2, 1)), Some(Matrix::zeros(3, 1)), vec![0]).is_err());
    }
}
