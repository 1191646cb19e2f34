//! Pipeline stages and the `run` driver that chains them.
//!
//! Artifacts land in the configured output directory:
//!
//! | file | written by |
//! |------|-----------|
//! | `model.gmm` | fit-gmm |
//! | `merger.tpmm` | fit-merger |
//! | `motion/<id>.tppf`, `manifest.motion.json` | encode-motion |
//! | `net.bin` or `net-appearance.bin` + `net-motion.bin`, `svm-global.tpsv` | train |
//! | `metrics.json` | eval |
//! | `baseline.tpsv`, `baseline.json` | baseline |
//! | `run.log` | every run |
//!
//! A stage whose inputs were not produced earlier in the same run loads them
//! from the output directory, and fails with a dependency error if they are
//! absent.

use std::path::{Path, PathBuf};

use rand::seq::index;
use rayon::prelude::*;

use super::config::{BaselineMode, ExperimentConfig, NetworkMode, Stage, SvmStageConfig};
use super::features::{read_frame_feature_header, write_frame_features};
use super::manifest::{load_manifest, DatasetManifest, Modality, Split, VideoSample};
use super::metrics::{evaluate_accuracy, evaluate_map, EvalReport, MetricKind};
use crate::codec;
use crate::error::{Error, Result};
use crate::featmerge::{fit_merger, MergeMap};
use crate::fisher::{build_video_motion_features, frame_motion_feature_indexed, load_trajectories, video_fisher_vector, TrajectoryIndex, TrajectoryRecord};
use crate::fusion::{late_fuse, pool_baseline, score_fuse_avg, svm_scores, train_linear_svm_multilabel, FusionWeights, SvmModel};
use crate::gmm::{fit_gmm, GmmModel};
use crate::numkit::{argmax, derive_seed, seeded_rng, Matrix};
use crate::tppnet::{predict, train, LabeledSequence, NetParams, PyramidSpec, TrainConfig, TrainOutcome};

pub const GMM_FILE: &str = "model.gmm";
pub const MERGER_FILE: &str = "merger.tpmm";
pub const MOTION_DIR: &str = "motion";
pub const MOTION_MANIFEST_FILE: &str = "manifest.motion.json";
pub const GLOBAL_SVM_FILE: &str = "svm-global.tpsv";
pub const METRICS_FILE: &str = "metrics.json";
pub const BASELINE_SVM_FILE: &str = "baseline.tpsv";
pub const BASELINE_METRICS_FILE: &str = "baseline.json";
pub const LOG_FILE: &str = "run.log";

/// Trajectories of every video in `split` (all videos when `None`) that has
/// a trajectory file.
pub fn load_trajectory_sets(manifest: &DatasetManifest, split: Option<Split>) -> Result<Vec<(usize, Vec<TrajectoryRecord>)>> {
    manifest
        .videos
        .par_iter()
        .enumerate()
        .filter(|(_, v)| split.is_none_or(|s| v.split == s))
        .filter_map(|(i, v)| v.trajectory_path.as_ref().map(|p| (i, manifest.resolve(p))))
        .map(|(i, p)| load_trajectories(&p).map(|r| (i, r)))
        .collect()
}

/// Uniform sample (without replacement, kept in file order) of at most
/// `max` descriptors.
pub fn sample_descriptors<'a>(sets: impl IntoIterator<Item = &'a [TrajectoryRecord]>, max: usize, seed: u64) -> Result<Matrix> {
    let all: Vec<&[f64]> = sets.into_iter().flatten().map(|r| r.descriptor.as_slice()).collect();
    if all.is_empty() {
        return Err(Error::Dependency { stage: "fit-gmm".into(), missing: "trajectory descriptors in the training split".into() });
    }
    if all.len() <= max {
        return Matrix::from_rows(&all);
    }
    let mut picked = index::sample(&mut seeded_rng(seed), all.len(), max).into_vec();
    picked.sort_unstable();
    let rows: Vec<&[f64]> = picked.into_iter().map(|i| all[i]).collect();
    Matrix::from_rows(&rows)
}

/// Frame-level motion features sampled from training videos, labelled by
/// each video's first label. Frames with empty windows are skipped.
pub fn merger_training_features(
    manifest: &DatasetManifest,
    gmm: &GmmModel,
    frames_per_video: usize,
    seed: u64,
) -> Result<(Matrix, Vec<usize>)> {
    let sets = load_trajectory_sets(manifest, Some(Split::Train))?;
    let per_video: Vec<Vec<(Vec<f64>, usize)>> = sets
        .par_iter()
        .map(|(vi, records)| {
            let v = &manifest.videos[*vi];
            let (n, _) = read_frame_feature_header(&manifest.resolve(&v.frame_feature_path))?;
            let label = manifest.label_indices(v)[0];
            let mut rng = seeded_rng(derive_seed(seed, *vi as u64));
            let mut frames = index::sample(&mut rng, n, frames_per_video.min(n)).into_vec();
            frames.sort_unstable();
            let idx = TrajectoryIndex::new(records);
            let mut rows = Vec::new();
            for f in frames {
                let enc = frame_motion_feature_indexed(&idx, f, gmm)?;
                if !enc.empty {
                    rows.push((enc.vector.values, label));
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let (rows, labels): (Vec<Vec<f64>>, Vec<usize>) = per_video.into_iter().flatten().unzip();
    if rows.is_empty() {
        return Err(Error::Dependency { stage: "fit-merger".into(), missing: "non-empty motion windows in the training split".into() });
    }
    Ok((Matrix::from_rows(&rows)?, labels))
}

/// Writes per-frame motion features for every video and returns a manifest
/// pointing at them, stored in `out_dir`. Videos without trajectories get
/// all-zero features.
pub fn encode_motion(
    manifest: &DatasetManifest,
    gmm: &GmmModel,
    merger: Option<&MergeMap>,
    out_dir: &Path,
) -> Result<(DatasetManifest, usize)> {
    let motion_dir = out_dir.join(MOTION_DIR);
    std::fs::create_dir_all(&motion_dir).map_err(|e| Error::io(&motion_dir, e))?;
    let empty_counts: Vec<usize> = manifest
        .videos
        .par_iter()
        .map(|v| {
            let (n, _) = read_frame_feature_header(&manifest.resolve(&v.frame_feature_path))?;
            let records = match &v.trajectory_path {
                Some(p) => load_trajectories(&manifest.resolve(p))?,
                None => Vec::new(),
            };
            let feats = build_video_motion_features(&records, n, gmm, merger)?;
            write_frame_features(&motion_dir.join(format!("{}.tppf", v.id)), &feats.features)?;
            Ok(feats.empty_frames.len())
        })
        .collect::<Result<_>>()?;

    let absolute = |p: &Path| std::fs::canonicalize(manifest.resolve(p)).map_err(|e| Error::io(p, e));
    let mut videos = manifest.videos.clone();
    for v in &mut videos {
        v.frame_feature_path = absolute(&v.frame_feature_path)?;
        if let Some(t) = &v.trajectory_path {
            v.trajectory_path = Some(absolute(t)?);
        }
        v.motion_feature_path = Some(PathBuf::from(MOTION_DIR).join(format!("{}.tppf", v.id)));
    }
    let out = DatasetManifest::new(manifest.classes.clone(), videos, out_dir)?;
    codec::write_file(&out_dir.join(MOTION_MANIFEST_FILE), out.to_json()?.as_bytes())?;
    Ok((out, empty_counts.iter().sum()))
}

pub fn load_samples(manifest: &DatasetManifest, split: Split, modality: Modality) -> Result<Vec<VideoSample>> {
    let entries: Vec<_> = manifest.split(split).collect();
    entries.par_iter().map(|v| manifest.load_sample(v, modality)).collect()
}

pub fn train_network(samples: &[VideoSample], classes: usize, modality: Modality, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let data = samples
        .iter()
        .map(|s| Ok(LabeledSequence { frames: s.input(modality)?.into_owned(), label: s.primary_label() }))
        .collect::<Result<Vec<_>>>()?;
    train(&data, classes, cfg)
}

/// Class probabilities, one row per sample.
pub fn network_probabilities(net: &NetParams, samples: &[VideoSample], modality: Modality) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|s| predict(net, &*s.input(modality)?))
        .collect::<Result<_>>()?;
    probability_matrix(rows, net.classes())
}

fn probability_matrix(rows: Vec<Vec<f64>>, classes: usize) -> Result<Matrix> {
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, classes));
    }
    Matrix::from_rows(&rows)
}

/// Applies `f` row-wise to two probability matrices.
pub fn combine_rows(a: &Matrix, b: &Matrix, f: impl Fn(&[f64], &[f64]) -> Result<Vec<f64>>) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(Error::shape("combine_rows", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let rows = a.row_iter().zip(b.row_iter()).map(|(x, y)| f(x, y)).collect::<Result<Vec<_>>>()?;
    probability_matrix(rows, a.cols())
}

pub fn late_fuse_rows(appearance: &Matrix, motion: &Matrix, w: FusionWeights) -> Result<Matrix> {
    combine_rows(appearance, motion, |a, m| late_fuse(a, m, w))
}

pub fn score_fuse_rows(net: &Matrix, svm: &Matrix) -> Result<Matrix> {
    combine_rows(net, svm, score_fuse_avg)
}

/// Scores `probs` (one row per sample) with the chosen metric. mAP uses all
/// labels of a video; accuracy uses the first.
pub fn score_report(metric: MetricKind, probs: &Matrix, samples: &[VideoSample]) -> Result<EvalReport> {
    match metric {
        MetricKind::Map => {
            let sets: Vec<Vec<usize>> = samples.iter().map(|s| s.labels.clone()).collect();
            let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
            evaluate_map(probs, &sets, &ids)
        }
        MetricKind::Accuracy => {
            let preds: Vec<usize> = probs.row_iter().map(argmax).collect();
            let labels: Vec<usize> = samples.iter().map(VideoSample::primary_label).collect();
            evaluate_accuracy(&preds, &labels, probs.cols())
        }
    }
}

/// Normalized whole-video Fisher vectors for the videos of `split`, in
/// manifest order, with their label sets and ids.
pub fn global_fisher_vectors(manifest: &DatasetManifest, split: Split, gmm: &GmmModel) -> Result<(Matrix, Vec<Vec<usize>>)> {
    let entries: Vec<_> = manifest.split(split).collect();
    let rows: Vec<Vec<f64>> = entries
        .par_iter()
        .map(|v| {
            let records = match &v.trajectory_path {
                Some(p) => load_trajectories(&manifest.resolve(p))?,
                None => Vec::new(),
            };
            Ok(video_fisher_vector(&records, gmm)?.values)
        })
        .collect::<Result<_>>()?;
    let sets = entries.iter().map(|v| manifest.label_indices(v)).collect();
    Ok((Matrix::from_rows(&rows)?, sets))
}

pub fn svm_probabilities(model: &SvmModel, features: &Matrix) -> Result<Matrix> {
    let rows = features.row_iter().map(|x| svm_scores(model, x)).collect::<Result<Vec<_>>>()?;
    probability_matrix(rows, model.classes())
}

/// Pooled raw-feature descriptors for a baseline.
pub fn baseline_features(samples: &[VideoSample], mode: BaselineMode, pyramid: PyramidSpec) -> Result<Matrix> {
    let rows = samples
        .iter()
        .map(|s| pool_baseline(&*s.input(mode.modality())?, mode.pooling(pyramid)))
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows)
}

pub fn train_svm(features: &Matrix, samples: &[VideoSample], classes: usize, cfg: SvmStageConfig, seed: u64) -> Result<SvmModel> {
    let sets: Vec<Vec<usize>> = samples.iter().map(|s| s.labels.clone()).collect();
    train_linear_svm_multilabel(features, &sets, classes, cfg.lambda, cfg.epochs, seed)
}

/// File name of the network trained on `modality` under `mode`.
pub fn net_file(mode: NetworkMode, modality: Modality) -> &'static str {
    match (mode, modality) {
        (NetworkMode::LateFusion, Modality::Appearance) => "net-appearance.bin",
        (NetworkMode::LateFusion, _) => "net-motion.bin",
        _ => "net.bin",
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: Option<EvalReport>,
    pub baseline_report: Option<EvalReport>,
    pub artifacts: Vec<PathBuf>,
    pub log: Vec<String>,
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    out: PathBuf,
    manifest: DatasetManifest,
    motion_manifest: Option<DatasetManifest>,
    gmm: Option<GmmModel>,
    merger: Option<MergeMap>,
    nets: Vec<(Modality, NetParams)>,
    global_svm: Option<SvmModel>,
    outcome: ExperimentOutcome,
}

fn load_or_missing<T>(stage: Stage, path: &Path, load: impl Fn(&Path) -> Result<T>) -> Result<T> {
    if !path.is_file() {
        return Err(Error::Dependency { stage: stage.name().into(), missing: path.display().to_string() });
    }
    load(path)
}

impl Run<'_> {
    fn log(&mut self, line: String) {
        self.outcome.log.push(line);
    }

    fn artifact(&mut self, name: impl AsRef<Path>) -> PathBuf {
        let p = self.out.join(name);
        self.outcome.artifacts.push(p.clone());
        p
    }

    fn gmm(&mut self, stage: Stage) -> Result<&GmmModel> {
        if self.gmm.is_none() {
            self.gmm = Some(load_or_missing(stage, &self.out.join(GMM_FILE), GmmModel::load)?);
        }
        Ok(self.gmm.as_ref().unwrap())
    }

    /// The merger, when the config asks for one.
    fn merger(&mut self, stage: Stage) -> Result<Option<&MergeMap>> {
        if self.cfg.merger.is_none() {
            return Ok(None);
        }
        if self.merger.is_none() {
            self.merger = Some(load_or_missing(stage, &self.out.join(MERGER_FILE), MergeMap::load)?);
        }
        Ok(self.merger.as_ref())
    }

    /// Manifest carrying motion feature paths.
    fn motion_manifest(&mut self, stage: Stage) -> Result<&DatasetManifest> {
        if self.motion_manifest.is_none() {
            let encoded = self.out.join(MOTION_MANIFEST_FILE);
            let m = if encoded.is_file() {
                load_manifest(&encoded)?
            } else if self.manifest.videos.iter().all(|v| v.motion_feature_path.is_some()) {
                self.manifest.clone()
            } else {
                return Err(Error::Dependency { stage: stage.name().into(), missing: format!("motion features ({})", encoded.display()) });
            };
            self.motion_manifest = Some(m);
        }
        Ok(self.motion_manifest.as_ref().unwrap())
    }

    fn samples(&mut self, stage: Stage, split: Split, modality: Modality) -> Result<Vec<VideoSample>> {
        let manifest = match modality {
            Modality::Appearance => &self.manifest,
            _ => self.motion_manifest(stage)?,
        };
        let samples = load_samples(manifest, split, modality)?;
        if samples.is_empty() {
            return Err(Error::Dependency { stage: stage.name().into(), missing: format!("videos in the {split:?} split") });
        }
        Ok(samples)
    }

    fn nets(&mut self, stage: Stage) -> Result<Vec<(Modality, NetParams)>> {
        if self.nets.is_empty() {
            for modality in self.cfg.network.streams() {
                let path = self.out.join(net_file(self.cfg.network, modality));
                self.nets.push((modality, load_or_missing(stage, &path, NetParams::load)?));
            }
        }
        Ok(self.nets.clone())
    }

    fn fit_gmm(&mut self) -> Result<()> {
        let cfg = self.cfg.gmm;
        let seed = self.cfg.stage_seed(Stage::FitGmm);
        let sets = load_trajectory_sets(&self.manifest, Some(Split::Train))?;
        let points = sample_descriptors(sets.iter().map(|(_, r)| r.as_slice()), cfg.max_descriptors, derive_seed(seed, 0))?;
        let model = fit_gmm(&points, cfg.components, derive_seed(seed, 1), cfg.max_iters, cfg.tol)?;
        model.save(&self.artifact(GMM_FILE))?;
        self.log(format!("fit-gmm: {} descriptors, K={}, p={}", points.rows(), model.components(), model.dim()));
        self.gmm = Some(model);
        Ok(())
    }

    fn fit_merger(&mut self) -> Result<()> {
        let mcfg = self.cfg.merger.expect("validated");
        let seed = self.cfg.stage_seed(Stage::FitMerger);
        let manifest = self.manifest.clone();
        let gmm = self.gmm(Stage::FitMerger)?;
        let (v, labels) = merger_training_features(&manifest, gmm, mcfg.frames_per_video, derive_seed(seed, 0))?;
        let map = fit_merger(&v, &labels, mcfg.k, derive_seed(seed, 1))?;
        map.save(&self.artifact(MERGER_FILE))?;
        self.log(format!("fit-merger: {} frames, {} -> {} dims", v.rows(), map.source_dim(), map.target_dim()));
        self.merger = Some(map);
        Ok(())
    }

    fn encode_motion(&mut self) -> Result<()> {
        self.gmm(Stage::EncodeMotion)?;
        self.merger(Stage::EncodeMotion)?;
        let (m, empty) = encode_motion(&self.manifest, self.gmm.as_ref().unwrap(), self.merger.as_ref(), &self.out)?;
        for v in &m.videos {
            self.outcome.artifacts.push(m.resolve(v.motion_feature_path.as_ref().unwrap()));
        }
        self.artifact(MOTION_MANIFEST_FILE);
        self.log(format!("encode-motion: {} videos, {empty} empty frame windows", m.videos.len()));
        self.motion_manifest = Some(m);
        Ok(())
    }

    fn train(&mut self) -> Result<()> {
        let seed = self.cfg.stage_seed(Stage::Train);
        let classes = self.manifest.classes.len();
        self.nets.clear();
        for (i, modality) in self.cfg.network.streams().into_iter().enumerate() {
            let samples = self.samples(Stage::Train, Split::Train, modality)?;
            let tcfg = TrainConfig { seed: derive_seed(seed, i as u64), ..self.cfg.train };
            let outcome = train_network(&samples, classes, modality, &tcfg)?;
            outcome.params.save(&self.artifact(net_file(self.cfg.network, modality)))?;
            self.log(format!(
                "train[{modality:?}]: {} videos, pooled dim {}, final epoch loss {:.6}",
                samples.len(),
                outcome.params.pooled_dim(),
                outcome.epoch_losses.last().copied().unwrap_or(f64::NAN)
            ));
            self.nets.push((modality, outcome.params));
        }
        if let Some(svm_cfg) = self.cfg.score_fusion {
            let manifest = self.manifest.clone();
            let gmm = self.gmm(Stage::Train)?;
            let (features, _) = global_fisher_vectors(&manifest, Split::Train, gmm)?;
            let samples = load_samples(&manifest, Split::Train, Modality::Appearance)?;
            let svm = train_svm(&features, &samples, classes, svm_cfg, derive_seed(seed, 100))?;
            svm.save(&self.artifact(GLOBAL_SVM_FILE))?;
            self.log(format!("train[global-fv svm]: {} videos, {} dims", features.rows(), features.cols()));
            self.global_svm = Some(svm);
        }
        Ok(())
    }

    fn eval(&mut self) -> Result<()> {
        let nets = self.nets(Stage::Eval)?;
        let mut streams = Vec::new();
        let mut samples = Vec::new();
        for (modality, net) in &nets {
            samples = self.samples(Stage::Eval, Split::Test, *modality)?;
            streams.push(network_probabilities(net, &samples, *modality)?);
        }
        let mut probs = match self.cfg.network {
            NetworkMode::LateFusion => late_fuse_rows(&streams[0], &streams[1], FusionWeights::new(self.cfg.w_appearance)?)?,
            _ => streams.pop().unwrap(),
        };
        if self.cfg.score_fusion.is_some() {
            if self.global_svm.is_none() {
                self.global_svm = Some(load_or_missing(Stage::Eval, &self.out.join(GLOBAL_SVM_FILE), SvmModel::load)?);
            }
            let manifest = self.manifest.clone();
            let gmm = self.gmm(Stage::Eval)?;
            let (features, _) = global_fisher_vectors(&manifest, Split::Test, gmm)?;
            let svm_probs = svm_probabilities(self.global_svm.as_ref().unwrap(), &features)?;
            probs = score_fuse_rows(&probs, &svm_probs)?;
        }
        let report = score_report(self.cfg.metric, &probs, &samples)?;
        let path = self.artifact(METRICS_FILE);
        codec::write_file(&path, serde_json::to_string_pretty(&report)?.as_bytes())?;
        self.log(format!("eval: {} test videos, {:?} = {:.6}", samples.len(), report.metric, report.aggregate));
        self.outcome.report = Some(report);
        Ok(())
    }

    fn baseline(&mut self) -> Result<()> {
        let bcfg = self.cfg.baseline.expect("validated");
        let seed = self.cfg.stage_seed(Stage::Baseline);
        let classes = self.manifest.classes.len();
        let modality = bcfg.mode.modality();
        let train_samples = self.samples(Stage::Baseline, Split::Train, modality)?;
        let test_samples = self.samples(Stage::Baseline, Split::Test, modality)?;
        let pyramid = self.cfg.train.pyramid;
        let train_x = baseline_features(&train_samples, bcfg.mode, pyramid)?;
        let svm = train_svm(&train_x, &train_samples, classes, bcfg.svm(), seed)?;
        svm.save(&self.artifact(BASELINE_SVM_FILE))?;
        let test_x = baseline_features(&test_samples, bcfg.mode, pyramid)?;
        let report = score_report(self.cfg.metric, &svm_probabilities(&svm, &test_x)?, &test_samples)?;
        let path = self.artifact(BASELINE_METRICS_FILE);
        codec::write_file(&path, serde_json::to_string_pretty(&report)?.as_bytes())?;
        self.log(format!("baseline[{:?}]: {} dims, {:?} = {:.6}", bcfg.mode, train_x.cols(), report.metric, report.aggregate));
        self.outcome.baseline_report = Some(report);
        Ok(())
    }
}

/// Loads `config_path` and runs its stages.
pub fn run_experiment(config_path: &Path) -> Result<ExperimentOutcome> {
    run_with_config(&ExperimentConfig::load(config_path)?)
}

pub fn run_with_config(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let manifest = load_manifest(&cfg.manifest_path())?;
    let mut run = Run {
        cfg,
        out: out.clone(),
        manifest,
        motion_manifest: None,
        gmm: None,
        merger: None,
        nets: Vec::new(),
        global_svm: None,
        outcome: ExperimentOutcome { report: None, baseline_report: None, artifacts: Vec::new(), log: Vec::new() },
    };
    run.log(format!("seed {} network {:?} stages {:?}", cfg.seed, cfg.network, cfg.ordered_stages()));
    let mut result = Ok(());
    for stage in cfg.ordered_stages() {
        result = match stage {
            Stage::FitGmm => run.fit_gmm(),
            Stage::FitMerger => run.fit_merger(),
            Stage::EncodeMotion => run.encode_motion(),
            Stage::Train => run.train(),
            Stage::Eval => run.eval(),
            Stage::Baseline => run.baseline(),
        };
        if let Err(e) = &result {
            run.log(format!("{}: failed: {e}", stage.name()));
            break;
        }
    }
    let log_path = out.join(LOG_FILE);
    let mut text = run.outcome.log.join("\n");
    text.push('\n');
    codec::write_file(&log_path, text.as_bytes())?;
    result?;
    run.outcome.artifacts.push(log_path);
    Ok(run.outcome)
}
