//! k-means and diagonal-covariance Gaussian mixtures fitted by EM.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::codec::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::numkit::{log_sum_exp, seeded_rng, Matrix, SeededRng};

/// Lower bound applied to every variance after each M-step.
pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const DEFAULT_EM_TOL: f64 = 1e-6;
pub const DEFAULT_EM_ITERS: usize = 100;
/// Lloyd iterations used when k-means initializes a mixture.
pub const INIT_KMEANS_ITERS: usize = 100;

const MAGIC: &[u8; 4] = b"TPGM";

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansResult {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every Lloyd iteration; the last entry equals `inertia`.
    pub inertia_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, ties to the lowest index.
fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.row_iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_plus_plus(points: &Matrix, k: usize, rng: &mut SeededRng) -> Matrix {
    let m = points.rows();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..m));
    let mut d2: Vec<f64> = points.row_iter().map(|p| sq_dist(p, points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` just above the final sum.
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            // Every point coincides with a centre; any unused index will do.
            (0..m).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(next);
        for (i, p) in points.row_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points.row(next)));
        }
    }
    let rows: Vec<&[f64]> = chosen.iter().map(|&i| points.row(i)).collect();
    Matrix::from_rows(&rows).unwrap()
}

/// Gives every empty cluster the point farthest from its current centroid,
/// drawn from clusters that can spare one. Ties go to the lowest point index.
fn repair_empty_clusters(points: &Matrix, centroids: &mut Matrix, assignments: &mut [usize]) {
    let k = centroids.rows();
    let mut sizes = vec![0usize; k];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    for j in 0..k {
        if sizes[j] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.row_iter().enumerate() {
            let a = assignments[i];
            if sizes[a] < 2 {
                continue;
            }
            let d = sq_dist(p, centroids.row(a));
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("m >= k guarantees a donor cluster");
        sizes[assignments[i]] -= 1;
        sizes[j] = 1;
        assignments[i] = j;
        centroids.row_mut(j).copy_from_slice(points.row(i));
    }
}

fn cluster_means(points: &Matrix, assignments: &[usize], k: usize) -> Matrix {
    let mut sums = Matrix::zeros(k, points.cols());
    let mut counts = vec![0usize; k];
    for (p, &a) in points.row_iter().zip(assignments) {
        counts[a] += 1;
        for (s, v) in sums.row_mut(a).iter_mut().zip(p) {
            *s += v;
        }
    }
    for (j, &c) in counts.iter().enumerate() {
        let c = c as f64;
        sums.row_mut(j).iter_mut().for_each(|s| *s /= c);
    }
    sums
}

fn inertia(points: &Matrix, centroids: &Matrix, assignments: &[usize]) -> f64 {
    points
        .row_iter()
        .zip(assignments)
        .map(|(p, &a)| sq_dist(p, centroids.row(a)))
        .sum()
}

/// Lloyd's algorithm from k-means++ seeding. Stops after `max_iters`
/// iterations or once an iteration leaves every assignment unchanged.
pub fn kmeans(points: &Matrix, k: usize, seed: u64, max_iters: usize) -> Result<KmeansResult> {
    let m = points.rows();
    if k == 0 {
        return Err(Error::Config("k-means needs k >= 1".into()));
    }
    if m < k {
        return Err(Error::InsufficientPoints { needed: k, got: m });
    }
    let mut rng = seeded_rng(seed);
    let mut centroids = kmeans_plus_plus(points, k, &mut rng);
    let mut assignments: Vec<usize> = Vec::new();
    let mut trace = Vec::new();

    for _ in 0..max_iters.max(1) {
        let mut next: Vec<usize> = points.row_iter().map(|p| nearest(p, &centroids).0).collect();
        repair_empty_clusters(points, &mut centroids, &mut next);
        let stable = next == assignments;
        assignments = next;
        centroids = cluster_means(points, &assignments, k);
        trace.push(inertia(points, &centroids, &assignments));
        if stable {
            break;
        }
    }
    Ok(KmeansResult {
        inertia: *trace.last().unwrap(),
        centroids,
        assignments,
        inertia_trace: trace,
    })
}

/// Diagonal-covariance Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    weights: Vec<f64>,
    means: Matrix,
    variances: Matrix,
    // log π_k − ½ Σ_d ln(2π σ²_kd), cached per component.
    log_norm: Vec<f64>,
}

impl GmmModel {
    pub fn new(weights: Vec<f64>, means: Matrix, variances: Matrix) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.rows() != k || variances.shape() != means.shape() || means.cols() == 0 {
            return Err(Error::shape(
                "GmmModel::new",
                format!("{k} weights, means {:?}, variances {:?}", means.shape(), variances.shape()),
            ));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::Config("mixture weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
        }
        if variances.as_slice().iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Config("variances must be positive".into()));
        }
        let log_norm = weights
            .iter()
            .zip(variances.row_iter())
            .map(|(w, var)| w.ln() - 0.5 * var.iter().map(|v| (2.0 * PI * v).ln()).sum::<f64>())
            .collect();
        Ok(Self { weights, means, variances, log_norm })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &Matrix {
        &self.means
    }

    pub fn variances(&self) -> &Matrix {
        &self.variances
    }

    /// `ln π_k + ln N(x; μ_k, diag σ²_k)` for every component, written into `out`.
    fn log_joint_into(&self, x: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let quad: f64 = x
                .iter()
                .zip(self.means.row(k))
                .zip(self.variances.row(k))
                .map(|((xi, mu), var)| (xi - mu) * (xi - mu) / var)
                .sum();
            *o = self.log_norm[k] - 0.5 * quad;
        }
    }

    /// Overwrites `out` with the posteriors and returns `ln p(x)`.
    pub(crate) fn posteriors_into(&self, x: &[f64], out: &mut [f64]) -> f64 {
        self.log_joint_into(x, out);
        let lse = log_sum_exp(out);
        out.iter_mut().for_each(|v| *v = (*v - lse).exp());
        lse
    }

    /// Responsibilities γ_k(x), computed in log space.
    pub fn posteriors(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        let mut out = vec![0.0; self.components()];
        self.posteriors_into(x, &mut out);
        Ok(out)
    }

    /// Log density of a single point under the mixture.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x.len())?;
        let mut buf = vec![0.0; self.components()];
        self.log_joint_into(x, &mut buf);
        Ok(log_sum_exp(&buf))
    }

    /// Mean per-point log density.
    pub fn log_likelihood(&self, points: &Matrix) -> Result<f64> {
        self.check_dim(points.cols())?;
        let mut buf = vec![0.0; self.components()];
        let mut total = 0.0;
        for p in points.row_iter() {
            self.log_joint_into(p, &mut buf);
            total += log_sum_exp(&buf);
        }
        Ok(total / points.rows() as f64)
    }

    fn check_dim(&self, p: usize) -> Result<()> {
        if p != self.dim() {
            return Err(Error::shape("gmm", format!("point has {p} dims, model has {}", self.dim())));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(MAGIC);
        w.count(self.components())?.count(self.dim())?;
        w.f64s(&self.weights).f64s(self.means.as_slice()).f64s(self.variances.as_slice());
        Ok(w.into_bytes())
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(path, bytes, MAGIC)?;
        let k = r.count("component count")?;
        let p = r.count("dimension")?;
        let weights = r.f64s(k, "weights")?;
        let means = r.f64s(k * p, "means")?;
        let variances = r.f64s(k * p, "variances")?;
        r.finish()?;
        Self::new(weights, Matrix::new(k, p, means)?, Matrix::new(k, p, variances)?)
            .map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(path, &codec::read_file(path)?)
    }
}

/// Mixture plus the mean log-likelihood recorded at initialization and after
/// every EM iteration.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: GmmModel,
    pub log_likelihood_trace: Vec<f64>,
}

/// Fits a `components`-way mixture with EM, starting from k-means.
pub fn fit_gmm(points: &Matrix, components: usize, seed: u64, max_iters: usize, tol: f64) -> Result<GmmModel> {
    fit_gmm_traced(points, components, seed, max_iters, tol).map(|f| f.model)
}

pub fn fit_gmm_traced(points: &Matrix, components: usize, seed: u64, max_iters: usize, tol: f64) -> Result<GmmFit> {
    if points.cols() == 0 {
        return Err(Error::shape("fit_gmm", "points have zero dimensions"));
    }
    let km = kmeans(points, components, seed, INIT_KMEANS_ITERS)?;
    let m = points.rows();
    let p = points.cols();

    let mut counts = vec![0usize; components];
    let mut variances = Matrix::zeros(components, p);
    for (x, &a) in points.row_iter().zip(&km.assignments) {
        counts[a] += 1;
        for ((v, xi), mu) in variances.row_mut(a).iter_mut().zip(x).zip(km.centroids.row(a)) {
            *v += (xi - mu) * (xi - mu);
        }
    }
    for (k, &c) in counts.iter().enumerate() {
        variances.row_mut(k).iter_mut().for_each(|v| *v = (*v / c as f64).max(VARIANCE_FLOOR));
    }
    let weights = normalize_weights(counts.iter().map(|&c| c as f64 / m as f64).collect());
    let mut model = GmmModel::new(weights, km.centroids, variances)?;

    let mut resp = Matrix::zeros(m, components);
    let mut ll = e_step(&model, points, &mut resp);
    let mut trace = vec![ll];
    for _ in 0..max_iters {
        model = m_step(&model, points, &resp)?;
        let next = e_step(&model, points, &mut resp);
        trace.push(next);
        let improvement = next - ll;
        ll = next;
        if improvement < tol {
            break;
        }
    }
    Ok(GmmFit { model, log_likelihood_trace: trace })
}

/// Fills `resp` with responsibilities and returns the mean log-likelihood.
/// Per-point log densities are summed in index order.
fn e_step(model: &GmmModel, points: &Matrix, resp: &mut Matrix) -> f64 {
    let k = model.components();
    let mut log_px = vec![0.0; points.rows()];
    resp.as_mut_slice()
        .par_chunks_mut(k)
        .zip(log_px.par_iter_mut())
        .enumerate()
        .for_each(|(i, (row, lp))| *lp = model.posteriors_into(points.row(i), row));
    log_px.iter().sum::<f64>() / points.rows() as f64
}

fn m_step(prev: &GmmModel, points: &Matrix, resp: &Matrix) -> Result<GmmModel> {
    let (m, p) = points.shape();
    let k = prev.components();
    let mut nk = vec![0.0; k];
    let mut means = Matrix::zeros(k, p);
    for (x, g) in points.row_iter().zip(resp.row_iter()) {
        for j in 0..k {
            nk[j] += g[j];
            for (s, xi) in means.row_mut(j).iter_mut().zip(x) {
                *s += g[j] * xi;
            }
        }
    }
    let degenerate: Vec<bool> = nk.iter().map(|&n| n < f64::MIN_POSITIVE).collect();
    for j in 0..k {
        if degenerate[j] {
            means.row_mut(j).copy_from_slice(prev.means.row(j));
        } else {
            means.row_mut(j).iter_mut().for_each(|s| *s /= nk[j]);
        }
    }
    let mut variances = Matrix::zeros(k, p);
    for (x, g) in points.row_iter().zip(resp.row_iter()) {
        for j in 0..k {
            if degenerate[j] {
                continue;
            }
            let mu = means.row(j).to_vec();
            for ((v, xi), mu) in variances.row_mut(j).iter_mut().zip(x).zip(&mu) {
                *v += g[j] * (xi - mu) * (xi - mu);
            }
        }
    }
    for j in 0..k {
        if degenerate[j] {
            variances.row_mut(j).copy_from_slice(prev.variances.row(j));
        } else {
            variances.row_mut(j).iter_mut().for_each(|v| *v = (*v / nk[j]).max(VARIANCE_FLOOR));
        }
    }
    let weights = normalize_weights(nk.iter().map(|n| n / m as f64).collect());
    GmmModel::new(weights, means, variances)
}

/// Floors vanishing weights and renormalizes so every component stays valid.
fn normalize_weights(mut w: Vec<f64>) -> Vec<f64> {
    const WEIGHT_FLOOR: f64 = 1e-12;
    w.iter_mut().for_each(|v| *v = v.max(WEIGHT_FLOOR));
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}
