//! Supervised feature merging: groups the `D` input dimensions into `k`
//! cliques by clustering their per-class mean signatures, then sums each
//! clique with a `√|clique|` normalizer.

use std::path::Path;

use crate::codec::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::gmm::kmeans;
use crate::numkit::Matrix;

const MAGIC: &[u8; 4] = b"TPMM";
const MERGE_KMEANS_ITERS: usize = 100;

/// Learned grouping of `D` source dimensions into `k` cliques.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeMap {
    cluster_of: Vec<usize>,
    norms: Vec<f64>,
}

impl MergeMap {
    /// Builds a map from per-dimension cluster indices. Every cluster in
    /// `0..k` must own at least one dimension.
    pub fn from_assignments(cluster_of: Vec<usize>, k: usize) -> Result<Self> {
        if k == 0 || k > cluster_of.len() {
            return Err(Error::InvalidTarget { k, dim: cluster_of.len() });
        }
        let mut sizes = vec![0usize; k];
        for (i, &c) in cluster_of.iter().enumerate() {
            if c >= k {
                return Err(Error::Config(format!("dimension {i} assigned to cluster {c} >= {k}")));
            }
            sizes[c] += 1;
        }
        if let Some(j) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Config(format!("clique {j} is empty")));
        }
        let norms = sizes.iter().map(|&s| (s as f64).sqrt()).collect();
        Ok(Self { cluster_of, norms })
    }

    pub fn source_dim(&self) -> usize {
        self.cluster_of.len()
    }

    pub fn target_dim(&self) -> usize {
        self.norms.len()
    }

    pub fn cluster_of(&self) -> &[usize] {
        &self.cluster_of
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    /// Source dimensions belonging to clique `j`, ascending.
    pub fn clique(&self, j: usize) -> Vec<usize> {
        (0..self.cluster_of.len()).filter(|&i| self.cluster_of[i] == j).collect()
    }

    /// `l_j = Σ_{p ∈ clique_j} h_p / norm_j`.
    pub fn apply(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.source_dim() {
            return Err(Error::shape("apply_merger", format!("input has {} dims, map expects {}", h.len(), self.source_dim())));
        }
        let mut out = vec![0.0; self.target_dim()];
        for (&c, &v) in self.cluster_of.iter().zip(h) {
            out[c] += v;
        }
        out.iter_mut().zip(&self.norms).for_each(|(o, n)| *o /= n);
        Ok(out)
    }

    /// Applies the map to every row.
    pub fn apply_rows(&self, x: &Matrix) -> Result<Matrix> {
        let rows = x.row_iter().map(|r| self.apply(r)).collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, self.target_dim()));
        }
        Matrix::from_rows(&rows)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(MAGIC);
        w.count(self.source_dim())?.count(self.target_dim())?;
        for &c in &self.cluster_of {
            w.u32(c as u32);
        }
        Ok(w.into_bytes())
    }

    /// Reads a map; norms are recomputed from clique sizes.
    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(path, bytes, MAGIC)?;
        let d = r.count("source dimension")?;
        let k = r.count("target dimension")?;
        let clusters = r.u32s(d, "cluster indices")?;
        r.finish()?;
        Self::from_assignments(clusters.into_iter().map(|c| c as usize).collect(), k)
            .map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(path, &codec::read_file(path)?)
    }
}

/// Per-class feature means, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeanMatrix(pub Matrix);

/// Averages the rows of `v` per class. Classes are `0..=max(labels)` and each
/// must have at least one sample.
pub fn class_means(v: &Matrix, labels: &[usize]) -> Result<ClassMeanMatrix> {
    if labels.len() != v.rows() {
        return Err(Error::shape("class_means", format!("{} labels for {} samples", labels.len(), v.rows())));
    }
    let c = labels.iter().max().map_or(0, |&m| m + 1);
    if c == 0 {
        return Err(Error::Label("no samples".into()));
    }
    let mut sums = Matrix::zeros(c, v.cols());
    let mut counts = vec![0usize; c];
    for (row, &l) in v.row_iter().zip(labels) {
        counts[l] += 1;
        for (s, x) in sums.row_mut(l).iter_mut().zip(row) {
            *s += x;
        }
    }
    if let Some(empty) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Label(format!("class {empty} has no samples")));
    }
    for (j, &n) in counts.iter().enumerate() {
        sums.row_mut(j).iter_mut().for_each(|s| *s /= n as f64);
    }
    Ok(ClassMeanMatrix(sums))
}

/// Learns a `D → k` merge map from labelled samples `v` (m×D).
pub fn fit_merger(v: &Matrix, labels: &[usize], k: usize, seed: u64) -> Result<MergeMap> {
    if k == 0 || k > v.cols() {
        return Err(Error::InvalidTarget { k, dim: v.cols() });
    }
    let ClassMeanMatrix(means) = class_means(v, labels)?;
    // Column i of the class-mean matrix is the signature of dimension i.
    let signatures = means.transpose();
    let km = kmeans(&signatures, k, seed, MERGE_KMEANS_ITERS)?;
    MergeMap::from_assignments(km.assignments, k)
}
