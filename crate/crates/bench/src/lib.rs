//! Fixtures shared by the criterion benchmarks.

use tpp_core::gmm::GmmModel;
use tpp_core::numkit::{seeded_rng, Matrix};

/// A well-conditioned diagonal mixture with uniform weights.
pub fn mixture(components: usize, dim: usize, seed: u64) -> GmmModel {
    let mut rng = seeded_rng(seed);
    let means = Matrix::gaussian(components, dim, 1.0, &mut rng);
    let variances = Matrix::new(components, dim, vec![1.0; components * dim]).unwrap();
    GmmModel::new(vec![1.0 / components as f64; components], means, variances).unwrap()
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::gaussian(rows, cols, 1.0, &mut seeded_rng(seed))
}
