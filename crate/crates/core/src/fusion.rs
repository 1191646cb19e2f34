//! Combining appearance and motion streams, plus the linear-SVM side of the
//! baselines and global-FV score fusion.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::codec::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::numkit::{dot, seeded_rng, softmax, Matrix};
use crate::tppnet::{pad_frames, tpp_forward, PyramidSpec};

const MAGIC: &[u8; 4] = b"TPSV";

/// Row-wise concatenation, appearance block first.
pub fn early_fuse(appearance: &Matrix, motion: &Matrix) -> Result<Matrix> {
    if appearance.rows() != motion.rows() {
        return Err(Error::shape(
            "early_fuse",
            format!("appearance has {} frames, motion has {}", appearance.rows(), motion.rows()),
        ));
    }
    let cols = appearance.cols() + motion.cols();
    let mut data = Vec::with_capacity(appearance.rows() * cols);
    for (a, m) in appearance.row_iter().zip(motion.row_iter()) {
        data.extend_from_slice(a);
        data.extend_from_slice(m);
    }
    Matrix::new(appearance.rows(), cols, data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionWeights {
    appearance: f64,
}

impl FusionWeights {
    pub fn new(appearance: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&appearance) {
            return Err(Error::Config(format!("appearance weight {appearance} outside [0, 1]")));
        }
        Ok(Self { appearance })
    }

    pub fn appearance(&self) -> f64 {
        self.appearance
    }

    pub fn motion(&self) -> f64 {
        1.0 - self.appearance
    }
}

impl Default for FusionWeights {
    /// One third appearance, two thirds motion.
    fn default() -> Self {
        Self { appearance: 1.0 / 3.0 }
    }
}

fn check_same_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("{} vs {} classes", a.len(), b.len())));
    }
    Ok(())
}

/// Weighted average of two class distributions.
pub fn late_fuse(p_appearance: &[f64], p_motion: &[f64], w: FusionWeights) -> Result<Vec<f64>> {
    check_same_len("late_fuse", p_appearance, p_motion)?;
    Ok(p_appearance
        .iter()
        .zip(p_motion)
        .map(|(a, m)| w.appearance() * a + w.motion() * m)
        .collect())
}

pub fn score_fuse_avg(net_probs: &[f64], svm_probs: &[f64]) -> Result<Vec<f64>> {
    check_same_len("score_fuse_avg", net_probs, svm_probs)?;
    Ok(net_probs.iter().zip(svm_probs).map(|(a, b)| 0.5 * (a + b)).collect())
}

/// One-vs-rest linear SVM.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    /// d×c, one column per class.
    pub weights: Matrix,
    pub biases: Vec<f64>,
    pub lambda: f64,
}

impl SvmModel {
    pub fn dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn classes(&self) -> usize {
        self.weights.cols()
    }

    /// Raw decision values `x·w_j + b_j`.
    pub fn margins(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::shape("svm_scores", format!("feature has {} dims, model expects {}", x.len(), self.dim())));
        }
        let mut out = self.biases.clone();
        for (xi, w) in x.iter().zip(self.weights.row_iter()) {
            for (o, wj) in out.iter_mut().zip(w) {
                *o += xi * wj;
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(MAGIC);
        w.count(self.dim())?.count(self.classes())?;
        w.f64s(self.weights.as_slice()).f64s(&self.biases);
        Ok(w.into_bytes())
    }

    /// The file does not carry `lambda`; it reads back as NaN.
    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(path, bytes, MAGIC)?;
        let d = r.count("dimension")?;
        let c = r.count("classes")?;
        let weights = Matrix::new(d, c, r.f64s(d * c, "weights")?)?;
        let biases = r.f64s(c, "biases")?;
        r.finish()?;
        Ok(Self { weights, biases, lambda: f64::NAN })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(path, &codec::read_file(path)?)
    }
}

/// Class distribution from a softmax over the one-vs-rest margins.
pub fn svm_scores(model: &SvmModel, x: &[f64]) -> Result<Vec<f64>> {
    Ok(softmax(&model.margins(x)?))
}

/// Single-label convenience wrapper over [`train_linear_svm_multilabel`].
pub fn train_linear_svm(
    features: &Matrix,
    labels: &[usize],
    classes: usize,
    lambda: f64,
    epochs: usize,
    seed: u64,
) -> Result<SvmModel> {
    let sets: Vec<Vec<usize>> = labels.iter().map(|&l| vec![l]).collect();
    train_linear_svm_multilabel(features, &sets, classes, lambda, epochs, seed)
}

/// Pegasos-style stochastic subgradient descent on
/// `λ/2·‖(w_j, b_j)‖² + mean hinge` for each class `j` against the rest.
/// Step size is `1/(λ·t)`; after each step `(w_j, b_j)` is projected onto
/// the ball of radius `1/√λ`. The bias is treated as the weight of a
/// constant feature.
pub fn train_linear_svm_multilabel(
    features: &Matrix,
    label_sets: &[Vec<usize>],
    classes: usize,
    lambda: f64,
    epochs: usize,
    seed: u64,
) -> Result<SvmModel> {
    let (m, d) = features.shape();
    if label_sets.len() != m {
        return Err(Error::shape("train_linear_svm", format!("{} label sets for {m} samples", label_sets.len())));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Config("lambda must be positive".into()));
    }
    if let Some(bad) = label_sets.iter().flatten().find(|&&l| l >= classes) {
        return Err(Error::Label(format!("label {bad} out of range for {classes} classes")));
    }
    let present = (0..classes).filter(|c| label_sets.iter().any(|s| s.contains(c))).count();
    if classes < 2 || present < 2 {
        return Err(Error::Label("SVM training needs at least two classes".into()));
    }

    // Row j holds (w_j, b_j).
    let mut w = Matrix::zeros(classes, d + 1);
    let radius = 1.0 / lambda.sqrt();
    let mut rng = seeded_rng(seed);
    let mut order: Vec<usize> = (0..m).collect();
    let mut t = 0usize;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let x = features.row(i);
            for j in 0..classes {
                let y = if label_sets[i].contains(&j) { 1.0 } else { -1.0 };
                let row = w.row_mut(j);
                let margin = y * (dot(&row[..d], x) + row[d]);
                let shrink = 1.0 - eta * lambda;
                row.iter_mut().for_each(|v| *v *= shrink);
                if margin < 1.0 {
                    for (v, xi) in row[..d].iter_mut().zip(x) {
                        *v += eta * y * xi;
                    }
                    row[d] += eta * y;
                }
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > radius {
                    let s = radius / norm;
                    row.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
    }
    let weights = w.slice_cols(0..d).transpose();
    let biases = (0..classes).map(|j| w.get(j, d)).collect();
    Ok(SvmModel { weights, biases, lambda })
}

/// Sum over classes of the regularized one-vs-rest hinge objective.
pub fn svm_objective(model: &SvmModel, features: &Matrix, label_sets: &[Vec<usize>]) -> Result<f64> {
    let m = features.rows() as f64;
    let mut total = 0.0;
    let mut hinge = vec![0.0; model.classes()];
    for (x, set) in features.row_iter().zip(label_sets) {
        let margins = model.margins(x)?;
        for (j, z) in margins.iter().enumerate() {
            let y = if set.contains(&j) { 1.0 } else { -1.0 };
            hinge[j] += (1.0 - y * z).max(0.0);
        }
    }
    for j in 0..model.classes() {
        let sq: f64 = (0..model.dim()).map(|i| model.weights.get(i, j).powi(2)).sum::<f64>() + model.biases[j].powi(2);
        total += 0.5 * model.lambda * sq + hinge[j] / m;
    }
    Ok(total)
}

/// Pooling used by the SVM baselines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaselinePool {
    /// Column mean over all frames.
    Average,
    /// The network's temporal pyramid, without the encoding layer.
    Pyramid(PyramidSpec),
}

/// Fixed-length video descriptor from raw frame features.
pub fn pool_baseline(features: &Matrix, mode: BaselinePool) -> Result<Vec<f64>> {
    match mode {
        BaselinePool::Average => {
            if features.rows() == 0 {
                return Err(Error::VideoTooShort { frames: 0, segments: 0 });
            }
            Ok(features.column_means(0..features.rows()))
        }
        BaselinePool::Pyramid(spec) => {
            let padded = pad_frames(features, spec.segments)?;
            tpp_forward(&padded, spec).map(|(v, _)| v)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::argmax;
    use crate::tppnet::PoolOp;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn mat(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn random_dist(rng: &mut crate::numkit::SeededRng, c: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..c).map(|_| rng.random::<f64>() + 1e-3).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    }

    #[test]
    fn early_fuse_examples() {
        let a = mat(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let m = mat(&[&[5.0], &[6.0]]);
        let f = early_fuse(&a, &m).unwrap();
        assert_eq!(f, mat(&[&[1.0, 2.0, 5.0], &[3.0, 4.0, 6.0]]));
        assert_eq!(f.slice_cols(0..2), a);
        assert_eq!(f.slice_cols(2..3), m);
        assert_eq!(early_fuse(&a, &Matrix::zeros(2, 0)).unwrap(), a);
        assert_eq!(early_fuse(&a, &Matrix::zeros(3, 1)).unwrap_err().kind(), "shape");
    }

    #[test]
    fn late_fuse_examples() {
        let w = FusionWeights::default();
        let out = late_fuse(&[1.0, 0.0], &[0.0, 1.0], w).unwrap();
        assert!((out[0] - 1.0 / 3.0).abs() < 1e-15 && (out[1] - 2.0 / 3.0).abs() < 1e-15);
        let p = [0.2, 0.3, 0.5];
        let same = late_fuse(&p, &p, w).unwrap();
        for (a, b) in same.iter().zip(p) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(late_fuse(&p, &[0.5, 0.5], w).is_err());
        assert!(FusionWeights::new(1.5).is_err());
    }

    #[test]
    fn fusion_preserves_distributions() {
        let mut rng = seeded_rng(1);
        for _ in 0..200 {
            let c = rng.random_range(2..10);
            let a = random_dist(&mut rng, c);
            let b = random_dist(&mut rng, c);
            let w = FusionWeights::new(rng.random()).unwrap();
            for out in [late_fuse(&a, &b, w).unwrap(), score_fuse_avg(&a, &b).unwrap()] {
                assert!(out.iter().all(|&v| v >= 0.0));
                assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn score_fuse_examples() {
        assert_eq!(score_fuse_avg(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(score_fuse_avg(&[0.25, 0.75], &[0.25, 0.75]).unwrap(), vec![0.25, 0.75]);
        assert!(score_fuse_avg(&[1.0], &[0.5, 0.5]).is_err());
    }

    fn blobs(seed: u64) -> (Matrix, Vec<usize>) {
        let mut rng = seeded_rng(seed);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let (cx, cy) = if i % 2 == 0 { (-2.0, -1.0) } else { (2.0, 1.5) };
            rows.push(vec![cx + noise.sample(&mut rng), cy + noise.sample(&mut rng)]);
            labels.push(i % 2);
        }
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn svm_separates_blobs() {
        let (x, y) = blobs(3);
        let model = train_linear_svm(&x, &y, 2, 1e-2, 20, 7).unwrap();
        for (row, &l) in x.row_iter().zip(&y) {
            assert_eq!(argmax(&svm_scores(&model, row).unwrap()), l);
        }
        let sets: Vec<Vec<usize>> = y.iter().map(|&l| vec![l]).collect();
        let zero = SvmModel { weights: Matrix::zeros(2, 2), biases: vec![0.0; 2], lambda: 1e-2 };
        assert!(svm_objective(&model, &x, &sets).unwrap() < svm_objective(&zero, &x, &sets).unwrap());
        assert_eq!(model, train_linear_svm(&x, &y, 2, 1e-2, 20, 7).unwrap());
    }

    #[test]
    fn heavy_regularization_shrinks_weights() {
        let (x, y) = blobs(4);
        let model = train_linear_svm(&x, &y, 2, 1e6, 5, 1).unwrap();
        for j in 0..2 {
            let norm = (0..2).map(|i| model.weights.get(i, j).powi(2)).sum::<f64>().sqrt();
            assert!(norm < 1e-2);
        }
    }

    #[test]
    fn svm_rejects_single_class() {
        let (x, _) = blobs(5);
        let y = vec![0; 60];
        assert_eq!(train_linear_svm(&x, &y, 2, 0.1, 2, 0).unwrap_err().kind(), "label");
        assert_eq!(train_linear_svm(&x, &y, 1, 0.1, 2, 0).unwrap_err().kind(), "label");
    }

    #[test]
    fn svm_scores_properties() {
        let zero = SvmModel { weights: Matrix::zeros(3, 4), biases: vec![0.0; 4], lambda: 1.0 };
        assert_eq!(svm_scores(&zero, &[1.0, 2.0, 3.0]).unwrap(), vec![0.25; 4]);
        let (x, y) = blobs(6);
        let m = train_linear_svm(&x, &y, 2, 1e-2, 5, 2).unwrap();
        let mut shifted = m.clone();
        shifted.biases.iter_mut().for_each(|b| *b += 3.0);
        for row in x.row_iter() {
            let a = svm_scores(&m, row).unwrap();
            let b = svm_scores(&shifted, row).unwrap();
            assert!(a.iter().zip(&b).all(|(u, v)| (u - v).abs() < 1e-12));
            assert_eq!(argmax(&a), argmax(&m.margins(row).unwrap()));
        }
        assert!(svm_scores(&m, &[1.0]).is_err());
    }

    #[test]
    fn svm_round_trip() {
        let (x, y) = blobs(7);
        let m = train_linear_svm(&x, &y, 2, 1e-2, 3, 2).unwrap();
        let bytes = m.to_bytes().unwrap();
        let back = SvmModel::from_bytes(Path::new("s.tpsv"), &bytes).unwrap();
        assert_eq!(back.weights, m.weights);
        assert_eq!(back.biases, m.biases);
        assert!(SvmModel::from_bytes(Path::new("s.tpsv"), &bytes[..10]).is_err());
    }

    #[test]
    fn pool_baseline_examples() {
        let v = [1.0, -2.0, 0.5];
        let constant = Matrix::from_rows(&[v; 5]).unwrap();
        assert_eq!(pool_baseline(&constant, BaselinePool::Average).unwrap(), v.to_vec());
        let x = Matrix::gaussian(9, 3, 1.0, &mut seeded_rng(2));
        assert_eq!(
            pool_baseline(&x, BaselinePool::Average).unwrap(),
            pool_baseline(&x, BaselinePool::Pyramid(PyramidSpec::new(0, PoolOp::Mean))).unwrap()
        );
        let y = mat(&[&[1.0, 8.0], &[5.0, 2.0], &[3.0, 3.0], &[0.0, 7.0]]);
        for pool in [PoolOp::Mean, PoolOp::Max] {
            let spec = PyramidSpec::new(2, pool);
            assert_eq!(pool_baseline(&y, BaselinePool::Pyramid(spec)).unwrap(), tpp_forward(&y, spec).unwrap().0);
        }
        assert_eq!(
            pool_baseline(&y, BaselinePool::Pyramid(PyramidSpec::new(2, PoolOp::Mean))).unwrap(),
            vec![2.25, 5.0, 3.0, 5.0, 1.5, 5.0]
        );
        // Short videos are padded like the network input.
        assert_eq!(pool_baseline(&y.slice_rows(0..1), BaselinePool::Pyramid(PyramidSpec::new(3, PoolOp::Mean))).unwrap().len(), 8);
    }
}
