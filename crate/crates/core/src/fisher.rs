//! Fisher vector encoding of trajectory descriptors and frame-level motion
//! features over a ±5 frame window.
//!
//! Encoded vectors lay out one block per mixture component, the mean
//! gradient (`p` values) followed by the variance gradient (`p` values), so
//! the full length is `2·K·p`.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::featmerge::MergeMap;
use crate::gmm::GmmModel;
use crate::numkit::Matrix;

/// Frames on each side of the query frame that contribute descriptors.
pub const WINDOW_RADIUS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    /// Reference frame of the trajectory.
    pub frame_index: usize,
    /// Concatenated HOF and MBH descriptor.
    pub descriptor: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherVector {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl FisherVector {
    pub fn zeros(len: usize) -> Self {
        Self { values: vec![0.0; len], normalized: true }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Encoded length for a mixture: `2·K·p`.
pub fn fv_len(model: &GmmModel) -> usize {
    2 * model.components() * model.dim()
}

/// Unnormalized Fisher vector of the rows of `descriptors`.
pub fn fv_encode(model: &GmmModel, descriptors: &Matrix) -> Result<FisherVector> {
    fv_encode_rows(model, descriptors.row_iter(), descriptors.cols())
}

fn fv_encode_rows<'a>(
    model: &GmmModel,
    rows: impl Iterator<Item = &'a [f64]>,
    cols: usize,
) -> Result<FisherVector> {
    let (k, p) = (model.components(), model.dim());
    if cols != p {
        return Err(Error::shape("fv_encode", format!("descriptors have {cols} dims, model has {p}")));
    }
    let sigmas: Vec<f64> = model.variances().as_slice().iter().map(|v| v.sqrt()).collect();
    let mut acc = vec![0.0; 2 * k * p];
    let mut gamma = vec![0.0; k];
    let mut count = 0usize;
    for x in rows {
        count += 1;
        model.posteriors_into(x, &mut gamma);
        for (j, &g) in gamma.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let mu = model.means().row(j);
            let sd = &sigmas[j * p..(j + 1) * p];
            let (gm, gs) = acc[2 * j * p..2 * (j + 1) * p].split_at_mut(p);
            for d in 0..p {
                let z = (x[d] - mu[d]) / sd[d];
                gm[d] += g * z;
                gs[d] += g * (z * z - 1.0);
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyWindow);
    }
    let t = count as f64;
    for (j, &w) in model.weights().iter().enumerate() {
        let (gm, gs) = acc[2 * j * p..2 * (j + 1) * p].split_at_mut(p);
        let mean_scale = 1.0 / (t * w.sqrt());
        let var_scale = 1.0 / (t * (2.0 * w).sqrt());
        gm.iter_mut().for_each(|v| *v *= mean_scale);
        gs.iter_mut().for_each(|v| *v *= var_scale);
    }
    Ok(FisherVector { values: acc, normalized: false })
}

/// Signed square root followed by L2 normalization. The zero vector maps to
/// itself.
pub fn fv_normalize(v: &FisherVector) -> FisherVector {
    let mut values: Vec<f64> = v.values.iter().map(|&z| z.signum() * z.abs().sqrt()).collect();
    let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        values.iter_mut().for_each(|x| *x /= norm);
    } else {
        values.iter_mut().for_each(|x| *x = 0.0);
    }
    FisherVector { values, normalized: true }
}

/// Records sorted by reference frame (stable), for window queries.
pub struct TrajectoryIndex<'a> {
    sorted: Vec<&'a TrajectoryRecord>,
}

impl<'a> TrajectoryIndex<'a> {
    pub fn new(records: &'a [TrajectoryRecord]) -> Self {
        let mut sorted: Vec<&TrajectoryRecord> = records.iter().collect();
        sorted.sort_by_key(|r| r.frame_index);
        Self { sorted }
    }

    /// Records whose frame lies in `[frame − 5, frame + 5]`.
    pub fn window(&self, frame: usize) -> &[&'a TrajectoryRecord] {
        let lo = frame.saturating_sub(WINDOW_RADIUS);
        let hi = frame + WINDOW_RADIUS;
        let start = self.sorted.partition_point(|r| r.frame_index < lo);
        let end = self.sorted.partition_point(|r| r.frame_index <= hi);
        &self.sorted[start..end]
    }
}

/// Normalized encoding of one frame's window. `empty` marks windows with no
/// descriptors, whose vector is all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowEncoding {
    pub vector: FisherVector,
    pub empty: bool,
}

/// Same as [`frame_motion_feature`] over a prebuilt index.
pub fn frame_motion_feature_indexed(index: &TrajectoryIndex<'_>, frame: usize, model: &GmmModel) -> Result<WindowEncoding> {
    let window = index.window(frame);
    if window.is_empty() {
        return Ok(WindowEncoding { vector: FisherVector::zeros(fv_len(model)), empty: true });
    }
    if let Some(r) = window.iter().find(|r| r.descriptor.len() != model.dim()) {
        return Err(Error::shape(
            "frame_motion_feature",
            format!("descriptor at frame {} has {} dims, model has {}", r.frame_index, r.descriptor.len(), model.dim()),
        ));
    }
    let fv = fv_encode_rows(model, window.iter().map(|r| r.descriptor.as_slice()), model.dim())?;
    Ok(WindowEncoding { vector: fv_normalize(&fv), empty: false })
}

/// Motion feature for `frame`: one normalized Fisher vector over every
/// descriptor in the surrounding 11-frame window.
pub fn frame_motion_feature(records: &[TrajectoryRecord], frame: usize, model: &GmmModel) -> Result<WindowEncoding> {
    frame_motion_feature_indexed(&TrajectoryIndex::new(records), frame, model)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionFeatures {
    pub features: Matrix,
    /// Frames whose window held no descriptors.
    pub empty_frames: Vec<usize>,
}

/// Per-frame motion features for a video of `n_frames` frames, optionally
/// reduced through `merger`.
pub fn build_video_motion_features(
    records: &[TrajectoryRecord],
    n_frames: usize,
    model: &GmmModel,
    merger: Option<&MergeMap>,
) -> Result<MotionFeatures> {
    if n_frames == 0 {
        return Err(Error::shape("build_video_motion_features", "video has no frames"));
    }
    if let Some(m) = merger {
        if m.source_dim() != fv_len(model) {
            return Err(Error::shape(
                "build_video_motion_features",
                format!("merger expects {} dims, encoder produces {}", m.source_dim(), fv_len(model)),
            ));
        }
    }
    let index = TrajectoryIndex::new(records);
    let rows: Vec<(Vec<f64>, bool)> = (0..n_frames)
        .into_par_iter()
        .map(|t| {
            let enc = frame_motion_feature_indexed(&index, t, model)?;
            let row = match merger {
                Some(m) => m.apply(&enc.vector.values)?,
                None => enc.vector.values,
            };
            Ok((row, enc.empty))
        })
        .collect::<Result<_>>()?;
    let empty_frames = rows.iter().enumerate().filter(|(_, r)| r.1).map(|(t, _)| t).collect();
    let rows: Vec<Vec<f64>> = rows.into_iter().map(|r| r.0).collect();
    Ok(MotionFeatures { features: Matrix::from_rows(&rows)?, empty_frames })
}

/// Normalized Fisher vector over every descriptor of a video, used by the
/// global-FV classifier.
pub fn video_fisher_vector(records: &[TrajectoryRecord], model: &GmmModel) -> Result<FisherVector> {
    if records.is_empty() {
        return Ok(FisherVector::zeros(fv_len(model)));
    }
    let fv = fv_encode_rows(model, records.iter().map(|r| r.descriptor.as_slice()), model.dim())?;
    Ok(fv_normalize(&fv))
}

/// Parses the trajectory text format: a `#dims p` header line, then one
/// record per line as `frame_index v1 ... vp`.
pub fn parse_trajectories(text: &str, path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let err = |line: usize, detail: String| Error::Parse { path: path.to_path_buf(), line, detail };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let dims = match lines.next() {
        Some((i, l)) => {
            let mut parts = l.split_whitespace();
            if parts.next() != Some("#dims") {
                return Err(err(i + 1, "expected `#dims p` header".into()));
            }
            let p = parts
                .next()
                .and_then(|s| s.parse::<usize>().ok())
                .filter(|&p| p > 0)
                .ok_or_else(|| err(i + 1, "header needs a positive dimension".into()))?;
            if parts.next().is_some() {
                return Err(err(i + 1, "trailing tokens after header".into()));
            }
            p
        }
        None => return Err(err(1, "missing `#dims p` header".into())),
    };
    let mut records = Vec::new();
    for (i, line) in lines {
        let mut parts = line.split_whitespace();
        let frame_index = parts
            .next()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| err(i + 1, "frame index must be a non-negative integer".into()))?;
        let descriptor = parts
            .map(|s| match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(err(i + 1, format!("bad descriptor value `{s}`"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        if descriptor.len() != dims {
            return Err(err(i + 1, format!("expected {dims} values, got {}", descriptor.len())));
        }
        records.push(TrajectoryRecord { frame_index, descriptor });
    }
    Ok(records)
}

pub fn load_trajectories(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trajectories(&text, path)
}

pub fn format_trajectories(dims: usize, records: &[TrajectoryRecord]) -> String {
    let mut out = format!("#dims {dims}\n");
    for r in records {
        let _ = write!(out, "{}", r.frame_index);
        for v in &r.descriptor {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    out
}
