//! Synthetic datasets with known structure, for tests and demos.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::codec;
use crate::error::Result;
use crate::fisher::{format_trajectories, TrajectoryRecord};
use crate::harness::features::write_frame_features;
use crate::harness::manifest::{DatasetManifest, Split, VideoEntry, VideoSample};
use crate::numkit::{seeded_rng, Matrix, SeededRng};
use crate::tppnet::LabeledSequence;

fn unit_vector(rng: &mut SeededRng, dim: usize) -> Vec<f64> {
    let n = Normal::new(0.0, 1.0).unwrap();
    let v: Vec<f64> = (0..dim).map(|_| n.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn noisy(rng: &mut SeededRng, base: &[f64], sigma: f64) -> Vec<f64> {
    let n = Normal::new(0.0, sigma).unwrap();
    base.iter().map(|b| b + n.sample(rng)).collect()
}

/// Two-class sequences whose label is the order of two motifs.
///
/// Class 0 shows motif A for the first half of the video and motif B for
/// the second; class 1 reverses the order. Odd-length videos get one
/// motif-free frame in the middle, so both classes contain exactly the same
/// number of A and B frames and any order-blind pooling sees the same
/// distribution for both. Lengths are uniform in `[10, 30]`; every frame
/// carries Gaussian noise (σ = 0.1). Labels alternate 0, 1, 0, ...
pub fn motif_order_sequences(count: usize, dim: usize, seed: u64) -> Vec<LabeledSequence> {
    let mut rng = seeded_rng(seed);
    let a: Vec<f64> = unit_vector(&mut rng, dim).into_iter().map(|v| 2.0 * v).collect();
    let b: Vec<f64> = unit_vector(&mut rng, dim).into_iter().map(|v| 2.0 * v).collect();
    let neutral = vec![0.0; dim];
    (0..count)
        .map(|i| {
            let label = i % 2;
            let n: usize = rng.random_range(10..=30);
            let half = n / 2;
            let (first, second) = if label == 0 { (&a, &b) } else { (&b, &a) };
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|t| {
                    let base = if t < half {
                        first
                    } else if n % 2 == 1 && t == half {
                        &neutral
                    } else {
                        second
                    };
                    noisy(&mut rng, base, 0.1)
                })
                .collect();
            LabeledSequence { frames: Matrix::from_rows(&rows).unwrap(), label }
        })
        .collect()
}

/// Four-class videos whose two modalities each carry half of the label.
///
/// Appearance frames reveal `label / 2`, motion frames reveal `label % 2`,
/// so each stream alone can separate only two groups of two classes while
/// both together identify the class. Lengths are uniform in `[5, 15]`.
pub fn complementary_samples(count: usize, dim: usize, seed: u64) -> Vec<VideoSample> {
    let mut rng = seeded_rng(seed);
    let app: Vec<Vec<f64>> = (0..2).map(|_| unit_vector(&mut rng, dim)).collect();
    let mot: Vec<Vec<f64>> = (0..2).map(|_| unit_vector(&mut rng, dim)).collect();
    (0..count)
        .map(|i| {
            let label = i % 4;
            let n: usize = rng.random_range(5..=15);
            let a: Vec<Vec<f64>> = (0..n).map(|_| noisy(&mut rng, &app[label / 2], 0.3)).collect();
            let m: Vec<Vec<f64>> = (0..n).map(|_| noisy(&mut rng, &mot[label % 2], 0.3)).collect();
            VideoSample::new(
                format!("c{i:04}"),
                Some(Matrix::from_rows(&a).unwrap()),
                Some(Matrix::from_rows(&m).unwrap()),
                vec![label],
            )
            .unwrap()
        })
        .collect()
}

/// Shape of an on-disk synthetic dataset.
#[derive(Debug, Clone, Copy)]
pub struct SynthDataset {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub appearance_dim: usize,
    pub descriptor_dim: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub trajectories_per_frame: usize,
    pub seed: u64,
}

impl Default for SynthDataset {
    fn default() -> Self {
        Self {
            classes: 3,
            train_per_class: 6,
            test_per_class: 3,
            appearance_dim: 6,
            descriptor_dim: 4,
            min_frames: 12,
            max_frames: 24,
            trajectories_per_frame: 2,
            seed: 0,
        }
    }
}

impl SynthDataset {
    /// Writes appearance features, trajectory files and `manifest.json`
    /// into `dir`, returning the manifest path.
    ///
    /// Appearance frames are noisy class prototypes. Trajectory descriptors
    /// come from a class-specific pair of motion prototypes, the first used
    /// in the first half of the video and the second afterwards.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let mut rng = seeded_rng(self.seed);
        let app: Vec<Vec<f64>> = (0..self.classes).map(|_| unit_vector(&mut rng, self.appearance_dim)).collect();
        let motion: Vec<[Vec<f64>; 2]> = (0..self.classes)
            .map(|_| [unit_vector(&mut rng, self.descriptor_dim), unit_vector(&mut rng, self.descriptor_dim)])
            .map(|[a, b]| [a.iter().map(|v| 2.0 * v).collect(), b.iter().map(|v| 2.0 * v).collect()])
            .collect();
        let classes: Vec<String> = (0..self.classes).map(|c| format!("action{c}")).collect();
        let mut videos = Vec::new();
        for (split, per_class) in [(Split::Train, self.train_per_class), (Split::Test, self.test_per_class)] {
            for i in 0..per_class * self.classes {
                let label = i % self.classes;
                let id = format!("{}{i:03}", if split == Split::Train { "tr" } else { "te" });
                let n: usize = rng.random_range(self.min_frames..=self.max_frames);
                let frames: Vec<Vec<f64>> = (0..n).map(|_| noisy(&mut rng, &app[label], 0.8)).collect();
                let mut records = Vec::new();
                for t in 0..n {
                    let proto = &motion[label][usize::from(t >= n / 2)];
                    for _ in 0..self.trajectories_per_frame {
                        records.push(TrajectoryRecord { frame_index: t, descriptor: noisy(&mut rng, proto, 0.5) });
                    }
                }
                let feat = format!("{id}.tppf");
                let traj = format!("{id}.traj");
                write_frame_features(&dir.join(&feat), &Matrix::from_rows(&frames)?)?;
                codec::write_file(&dir.join(&traj), format_trajectories(self.descriptor_dim, &records).as_bytes())?;
                videos.push(VideoEntry {
                    id,
                    labels: vec![classes[label].clone()],
                    frame_feature_path: feat.into(),
                    trajectory_path: Some(traj.into()),
                    motion_feature_path: None,
                    split,
                });
            }
        }
        let manifest = DatasetManifest::new(classes, videos, dir)?;
        let path = dir.join("manifest.json");
        codec::write_file(&path, manifest.to_json()?.as_bytes())?;
        Ok(path)
    }
}
