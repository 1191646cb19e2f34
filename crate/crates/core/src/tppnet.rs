//! Encoding layer, temporal pyramid pooling and softmax classifier, with
//! hand-derived backpropagation and momentum SGD.
//!
//! A video is an `n×d` matrix of frame features. The encoding layer maps
//! every frame to `D` ReLU units, the pyramid pools those over the whole
//! video and over `b` equal segments, and the classifier maps the
//! `(1+b)·D` pooled vector to class probabilities. The pooled length never
//! depends on `n`.

use std::borrow::Cow;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::codec::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::numkit::{affine, argmax, derive_seed, relu, seeded_rng, softmax, Matrix};

const MAGIC: &[u8; 4] = b"TPNP";
/// Probabilities are clamped here before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolOp {
    #[default]
    Mean,
    Max,
}

impl PoolOp {
    fn code(self) -> u32 {
        match self {
            PoolOp::Mean => 0,
            PoolOp::Max => 1,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(PoolOp::Mean),
            1 => Some(PoolOp::Max),
            _ => None,
        }
    }
}

/// Two-level pyramid: the whole video plus `segments` equal parts.
/// `segments == 0` keeps only the coarse level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidSpec {
    pub segments: usize,
    #[serde(default)]
    pub pool: PoolOp,
}

impl PyramidSpec {
    pub fn new(segments: usize, pool: PoolOp) -> Self {
        Self { segments, pool }
    }

    /// Number of pooled blocks, `1 + b`.
    pub fn blocks(&self) -> usize {
        1 + self.segments
    }
}

impl Default for PyramidSpec {
    fn default() -> Self {
        Self { segments: 5, pool: PoolOp::Mean }
    }
}

/// Coarse range first, then `b` fine ranges `⌊i·n/b⌋..⌊(i+1)·n/b⌋`.
pub fn segment_bounds(n: usize, b: usize) -> Result<Vec<Range<usize>>> {
    if n == 0 || n < b {
        return Err(Error::VideoTooShort { frames: n, segments: b });
    }
    let mut out = Vec::with_capacity(1 + b);
    out.push(0..n);
    out.extend((0..b).map(|i| i * n / b..(i + 1) * n / b));
    Ok(out)
}

/// Repeats the last row until the video has at least `max(1, b)` frames.
pub fn pad_frames(x: &Matrix, b: usize) -> Result<Cow<'_, Matrix>> {
    if x.rows() == 0 {
        return Err(Error::VideoTooShort { frames: 0, segments: b });
    }
    if x.rows() >= b {
        return Ok(Cow::Borrowed(x));
    }
    let mut padded = x.clone();
    let last = x.row(x.rows() - 1).to_vec();
    while padded.rows() < b {
        padded.push_row(&last)?;
    }
    Ok(Cow::Owned(padded))
}

/// Which rows fed each pooled element.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolTrace {
    pub pool: PoolOp,
    pub segments: Vec<Range<usize>>,
    /// For max pooling, the winning row of each pooled element
    /// (`segment·D + column`). Empty for mean pooling.
    pub argmax: Vec<usize>,
}

/// Pools `y` (n×D) into a `(1+b)·D` vector, coarse block first.
pub fn tpp_forward(y: &Matrix, spec: PyramidSpec) -> Result<(Vec<f64>, PoolTrace)> {
    let segments = segment_bounds(y.rows(), spec.segments)?;
    let width = y.cols();
    let mut pooled = Vec::with_capacity(segments.len() * width);
    let mut winners = Vec::new();
    for seg in &segments {
        match spec.pool {
            PoolOp::Mean => pooled.extend(y.column_means(seg.clone())),
            PoolOp::Max => {
                for c in 0..width {
                    let mut best = seg.start;
                    for r in seg.clone() {
                        if y.get(r, c) > y.get(best, c) {
                            best = r;
                        }
                    }
                    pooled.push(y.get(best, c));
                    winners.push(best);
                }
            }
        }
    }
    Ok((pooled, PoolTrace { pool: spec.pool, segments, argmax: winners }))
}

/// Routes the gradient of the pooled vector back to the `rows×width`
/// input of [`tpp_forward`].
pub fn tpp_backward(trace: &PoolTrace, grad_pooled: &[f64], rows: usize, width: usize) -> Matrix {
    let mut grad = Matrix::zeros(rows, width);
    for (s, seg) in trace.segments.iter().enumerate() {
        let block = &grad_pooled[s * width..(s + 1) * width];
        match trace.pool {
            PoolOp::Mean => {
                let inv = 1.0 / seg.len() as f64;
                for r in seg.clone() {
                    for (g, &d) in grad.row_mut(r).iter_mut().zip(block) {
                        *g += d * inv;
                    }
                }
            }
            PoolOp::Max => {
                for (c, &d) in block.iter().enumerate() {
                    let r = trace.argmax[s * width + c];
                    let cur = grad.get(r, c);
                    grad.set(r, c, cur + d);
                }
            }
        }
    }
    grad
}

/// Weights of the encoding layer (`w_a`, `b_a`) and classifier (`w_b`, `b_b`).
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    /// d×D
    pub w_a: Matrix,
    pub b_a: Vec<f64>,
    /// (1+b)·D × c
    pub w_b: Matrix,
    pub b_b: Vec<f64>,
    pub pyramid: PyramidSpec,
}

impl NetParams {
    /// Zero biases; weights from N(0, 2/fan_in).
    pub fn init(input_dim: usize, hidden_dim: usize, classes: usize, pyramid: PyramidSpec, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let pooled = pyramid.blocks() * hidden_dim;
        let w_a = Matrix::gaussian(input_dim, hidden_dim, (2.0 / input_dim.max(1) as f64).sqrt(), &mut rng);
        let w_b = Matrix::gaussian(pooled, classes, (2.0 / pooled.max(1) as f64).sqrt(), &mut rng);
        Self { w_a, b_a: vec![0.0; hidden_dim], w_b, b_b: vec![0.0; classes], pyramid }
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize, classes: usize, pyramid: PyramidSpec) -> Self {
        Self {
            w_a: Matrix::zeros(input_dim, hidden_dim),
            b_a: vec![0.0; hidden_dim],
            w_b: Matrix::zeros(pyramid.blocks() * hidden_dim, classes),
            b_b: vec![0.0; classes],
            pyramid,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_a.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_a.cols()
    }

    pub fn classes(&self) -> usize {
        self.w_b.cols()
    }

    pub fn pooled_dim(&self) -> usize {
        self.pyramid.blocks() * self.hidden_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.b_a.len() == self.hidden_dim()
            && self.w_b.rows() == self.pooled_dim()
            && self.b_b.len() == self.classes()
            && self.classes() > 0;
        if !ok {
            return Err(Error::shape(
                "NetParams",
                format!(
                    "w_a {:?}, b_a {}, w_b {:?}, b_b {}, {} blocks",
                    self.w_a.shape(),
                    self.b_a.len(),
                    self.w_b.shape(),
                    self.b_b.len(),
                    self.pyramid.blocks()
                ),
            ));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(MAGIC);
        w.count(self.input_dim())?
            .count(self.hidden_dim())?
            .count(self.pyramid.segments)?
            .count(self.classes())?
            .u32(self.pyramid.pool.code());
        w.f64s(self.w_a.as_slice()).f64s(&self.b_a).f64s(self.w_b.as_slice()).f64s(&self.b_b);
        Ok(w.into_bytes())
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(path, bytes, MAGIC)?;
        let d = r.count("input dim")?;
        let hidden = r.count("hidden dim")?;
        let b = r.count("segments")?;
        let c = r.count("classes")?;
        let code = r.u32("pool op")?;
        let pool = PoolOp::from_code(code).ok_or_else(|| r.error(format!("unknown pool op code {code}")))?;
        let pyramid = PyramidSpec::new(b, pool);
        let pooled = pyramid.blocks() * hidden;
        let w_a = Matrix::new(d, hidden, r.f64s(d * hidden, "w_a")?)?;
        let b_a = r.f64s(hidden, "b_a")?;
        let w_b = Matrix::new(pooled, c, r.f64s(pooled * c, "w_b")?)?;
        let b_b = r.f64s(c, "b_b")?;
        r.finish()?;
        let params = Self { w_a, b_a, w_b, b_b, pyramid };
        params.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(path, &codec::read_file(path)?)
    }
}

/// Gradients (or momentum buffers) with the same layout as [`NetParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w_a: Matrix,
    pub b_a: Vec<f64>,
    pub w_b: Matrix,
    pub b_b: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(p: &NetParams) -> Self {
        Self {
            w_a: Matrix::zeros(p.w_a.rows(), p.w_a.cols()),
            b_a: vec![0.0; p.b_a.len()],
            w_b: Matrix::zeros(p.w_b.rows(), p.w_b.cols()),
            b_b: vec![0.0; p.b_b.len()],
        }
    }

    pub fn is_zero(&self) -> bool {
        [self.w_a.as_slice(), &self.b_a, self.w_b.as_slice(), &self.b_b]
            .iter()
            .all(|t| t.iter().all(|&v| v == 0.0))
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input after padding to at least `b` frames.
    pub input: Matrix,
    pub pre_activation: Matrix,
    pub encoded: Matrix,
    pub trace: PoolTrace,
    pub pooled: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Class probabilities for one video, plus everything backward needs.
pub fn forward(x: &Matrix, params: &NetParams) -> Result<(Vec<f64>, ForwardCache)> {
    if x.cols() != params.input_dim() {
        return Err(Error::shape("forward", format!("frames have {} dims, net expects {}", x.cols(), params.input_dim())));
    }
    let input = pad_frames(x, params.pyramid.segments)?.into_owned();
    let pre_activation = affine(&input, &params.w_a, &params.b_a)?;
    let encoded = relu(&pre_activation);
    let (pooled, trace) = tpp_forward(&encoded, params.pyramid)?;
    let pooled_m = Matrix::new(1, pooled.len(), pooled.clone())?;
    let logits = affine(&pooled_m, &params.w_b, &params.b_b)?.into_vec();
    let probs = softmax(&logits);
    let cache = ForwardCache { input, pre_activation, encoded, trace, pooled, logits, probs: probs.clone() };
    Ok((probs, cache))
}

pub fn predict(params: &NetParams, x: &Matrix) -> Result<Vec<f64>> {
    forward(x, params).map(|(p, _)| p)
}

/// Negative log-likelihood of `label`.
pub fn loss(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs
        .get(label)
        .ok_or_else(|| Error::Label(format!("label {label} out of range for {} classes", probs.len())))?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Exact gradients of the instance loss for `label`.
pub fn backward(params: &NetParams, cache: &ForwardCache, label: usize) -> Result<Gradients> {
    let c = params.classes();
    if label >= c {
        return Err(Error::Label(format!("label {label} out of range for {c} classes")));
    }
    let mut delta = cache.probs.clone();
    delta[label] -= 1.0;

    let pooled_dim = cache.pooled.len();
    let mut w_b = Matrix::zeros(pooled_dim, c);
    for (i, &h) in cache.pooled.iter().enumerate() {
        if h != 0.0 {
            for (g, &d) in w_b.row_mut(i).iter_mut().zip(&delta) {
                *g = h * d;
            }
        }
    }
    let grad_pooled: Vec<f64> = (0..pooled_dim)
        .map(|i| params.w_b.row(i).iter().zip(&delta).map(|(w, d)| w * d).sum())
        .collect();

    let (rows, hidden) = cache.encoded.shape();
    let mut grad_pre = tpp_backward(&cache.trace, &grad_pooled, rows, hidden);
    for (g, &z) in grad_pre.as_mut_slice().iter_mut().zip(cache.pre_activation.as_slice()) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }

    let mut w_a = Matrix::zeros(params.input_dim(), hidden);
    let mut b_a = vec![0.0; hidden];
    for r in 0..rows {
        let g = grad_pre.row(r);
        for (b, &v) in b_a.iter_mut().zip(g) {
            *b += v;
        }
        for (i, &x) in cache.input.row(r).iter().enumerate() {
            if x != 0.0 {
                for (w, &v) in w_a.row_mut(i).iter_mut().zip(g) {
                    *w += x * v;
                }
            }
        }
    }
    Ok(Gradients { w_a, b_a, w_b, b_b: delta })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `v ← μ·v − lr·(g + λ·θ)`, `θ ← θ + v`. Weight decay skips the biases.
pub fn sgd_step(params: &mut NetParams, grads: &Gradients, velocity: &mut Gradients, cfg: SgdConfig) {
    fn update(theta: &mut [f64], g: &[f64], v: &mut [f64], cfg: SgdConfig, decay: f64) {
        for ((t, &g), v) in theta.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = cfg.momentum * *v - cfg.learning_rate * (g + decay * *t);
            *t += *v;
        }
    }
    let wd = cfg.weight_decay;
    update(params.w_a.as_mut_slice(), grads.w_a.as_slice(), velocity.w_a.as_mut_slice(), cfg, wd);
    update(&mut params.b_a, &grads.b_a, &mut velocity.b_a, cfg, 0.0);
    update(params.w_b.as_mut_slice(), grads.w_b.as_slice(), velocity.w_b.as_mut_slice(), cfg, wd);
    update(&mut params.b_b, &grads.b_b, &mut velocity.b_b, cfg, 0.0);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Width `D` of the encoding layer.
    pub hidden_dim: usize,
    pub pyramid: PyramidSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 25,
            seed: 0,
            hidden_dim: 1024,
            pyramid: PyramidSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if self.epochs == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("epochs and hidden_dim must be >= 1".into()));
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig { learning_rate: self.learning_rate, momentum: self.momentum, weight_decay: self.weight_decay }
    }
}

/// A video's frame features and its training class.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    pub frames: Matrix,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetParams,
    /// Mean instance loss of each epoch, measured before each update.
    pub epoch_losses: Vec<f64>,
}

/// Instance-level SGD: every epoch visits the videos once in a seeded
/// shuffled order, taking one step per video.
pub fn train(data: &[LabeledSequence], classes: usize, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let first = data.first().ok_or_else(|| Error::Config("empty training set".into()))?;
    let d = first.frames.cols();
    let mut seen = vec![false; classes];
    for (i, s) in data.iter().enumerate() {
        if s.frames.cols() != d {
            return Err(Error::shape("train", format!("video {i} has {} dims, expected {d}", s.frames.cols())));
        }
        if s.frames.rows() == 0 {
            return Err(Error::VideoTooShort { frames: 0, segments: config.pyramid.segments });
        }
        *seen
            .get_mut(s.label)
            .ok_or_else(|| Error::Label(format!("video {i} has label {} >= {classes}", s.label)))? = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Label(format!("class {missing} has no training videos")));
    }
    let mut params = NetParams::init(d, config.hidden_dim, classes, config.pyramid, derive_seed(config.seed, 0));
    let mut velocity = Gradients::zeros_like(&params);
    let mut rng = seeded_rng(derive_seed(config.seed, 1));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let sample = &data[i];
            let (probs, cache) = forward(&sample.frames, &params)?;
            total += loss(&probs, sample.label)?;
            let grads = backward(&params, &cache, sample.label)?;
            sgd_step(&mut params, &grads, &mut velocity, config.sgd());
        }
        epoch_losses.push(total / data.len() as f64);
    }
    Ok(TrainOutcome { params, epoch_losses })
}

/// Most probable class.
pub fn classify(params: &NetParams, x: &Matrix) -> Result<usize> {
    predict(params, x).map(|p| argmax(&p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn mat(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn segment_examples() {
        assert_eq!(segment_bounds(6, 3).unwrap(), vec![0..6, 0..2, 2..4, 4..6]);
        assert_eq!(segment_bounds(7, 3).unwrap(), vec![0..7, 0..2, 2..4, 4..7]);
        assert_eq!(segment_bounds(9, 0).unwrap(), vec![0..9]);
        assert_eq!(segment_bounds(2, 3).unwrap_err().kind(), "video_too_short");
        assert!(segment_bounds(0, 0).is_err());
    }

    #[test]
    fn fine_segments_partition_the_video() {
        for n in 1..40 {
            for b in 1..=n.min(8) {
                let segs = segment_bounds(n, b).unwrap();
                assert_eq!(segs[1].start, 0);
                assert_eq!(segs[b].end, n);
                for w in segs[1..].windows(2) {
                    assert_eq!(w[0].end, w[1].start);
                }
                assert!(segs.iter().all(|s| !s.is_empty()));
            }
        }
    }

    #[test]
    fn padding_repeats_last_frame() {
        let x = mat(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let p = pad_frames(&x, 5).unwrap();
        assert_eq!(p.rows(), 5);
        assert_eq!(p.row(4), &[3.0, 4.0]);
        assert!(matches!(pad_frames(&x, 2).unwrap(), Cow::Borrowed(_)));
        assert!(pad_frames(&Matrix::zeros(0, 2), 0).is_err());
    }

    #[test]
    fn tpp_identical_rows() {
        let v = [0.5, -1.0, 2.0];
        let y = Matrix::from_rows(&[v; 7]).unwrap();
        for pool in [PoolOp::Mean, PoolOp::Max] {
            let (pooled, _) = tpp_forward(&y, PyramidSpec::new(3, pool)).unwrap();
            assert_eq!(pooled.len(), 12);
            for block in pooled.chunks(3) {
                assert_eq!(block, &v);
            }
        }
    }

    #[test]
    fn tpp_mean_coarse_is_column_mean() {
        let y = mat(&[&[1.0, 4.0], &[2.0, 5.0], &[6.0, 0.0]]);
        let (pooled, _) = tpp_forward(&y, PyramidSpec::new(0, PoolOp::Mean)).unwrap();
        assert_eq!(pooled, vec![3.0, 3.0]);
    }

    #[test]
    fn tpp_max_by_hand() {
        let y = mat(&[&[1.0, 8.0], &[5.0, 2.0], &[3.0, 3.0], &[0.0, 7.0]]);
        let (pooled, trace) = tpp_forward(&y, PyramidSpec::new(2, PoolOp::Max)).unwrap();
        // whole: (5, 8); rows 0-1: (5, 8); rows 2-3: (3, 7)
        assert_eq!(pooled, vec![5.0, 8.0, 5.0, 8.0, 3.0, 7.0]);
        assert_eq!(trace.argmax, vec![1, 0, 1, 0, 2, 3]);
    }

    #[test]
    fn max_ties_route_to_lowest_row() {
        let y = mat(&[&[2.0], &[2.0], &[1.0]]);
        let (_, trace) = tpp_forward(&y, PyramidSpec::new(0, PoolOp::Max)).unwrap();
        assert_eq!(trace.argmax, vec![0]);
        let g = tpp_backward(&trace, &[1.0], 3, 1);
        assert_eq!(g.as_slice(), &[1.0, 0.0, 0.0]);
    }

    fn random_params(d: usize, hidden: usize, c: usize, spec: PyramidSpec, seed: u64) -> NetParams {
        let mut p = NetParams::init(d, hidden, c, spec, seed);
        let mut rng = seeded_rng(seed ^ 0xabc);
        p.b_a.iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
        p.b_b.iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
        p
    }

    #[test]
    fn zero_net_is_uniform() {
        let p = NetParams::zeros(3, 4, 5, PyramidSpec::new(2, PoolOp::Mean));
        let x = Matrix::gaussian(6, 3, 1.0, &mut seeded_rng(1));
        let probs = predict(&p, &x).unwrap();
        assert!(probs.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn hand_sized_network() {
        // n=3, d=2, D=2, b=1, c=2, evaluated step by step.
        let x = mat(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let params = NetParams {
            w_a: mat(&[&[0.5, -1.0], &[0.25, 1.0]]),
            b_a: vec![0.1, 0.0],
            w_b: mat(&[&[1.0, 0.0], &[0.0, 1.0], &[0.5, -0.5], &[-1.0, 2.0]]),
            b_b: vec![0.0, 0.2],
            pyramid: PyramidSpec::new(1, PoolOp::Mean),
        };
        // pre-activations: [0.6,-1.0], [0.35,1.0], [0.85,0.0] -> relu
        let ya: [[f64; 2]; 3] = [[0.6, 0.0], [0.35, 1.0], [0.85, 0.0]];
        let mean0 = (ya[0][0] + ya[1][0] + ya[2][0]) / 3.0;
        let mean1 = (ya[0][1] + ya[1][1] + ya[2][1]) / 3.0;
        let pooled = [mean0, mean1, mean0, mean1];
        let z0 = pooled[0] * 1.0 + pooled[2] * 0.5 + pooled[3] * -1.0;
        let z1 = pooled[1] * 1.0 + pooled[2] * -0.5 + pooled[3] * 2.0 + 0.2;
        let e0 = z0.exp();
        let e1 = z1.exp();
        let want = [e0 / (e0 + e1), e1 / (e0 + e1)];
        let (probs, cache) = forward(&x, &params).unwrap();
        assert_eq!(cache.pooled.len(), 4);
        for (a, b) in probs.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_pooling_ignores_frame_duplication() {
        let spec = PyramidSpec::new(2, PoolOp::Mean);
        let p = random_params(3, 5, 3, spec, 4);
        let x = Matrix::gaussian(6, 3, 1.0, &mut seeded_rng(9));
        // Duplicate each frame in place so every segment keeps its content.
        let rows: Vec<&[f64]> = x.row_iter().flat_map(|r| [r, r]).collect();
        let doubled = Matrix::from_rows(&rows).unwrap();
        let a = predict(&p, &x).unwrap();
        let b = predict(&p, &doubled).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
        assert_eq!(argmax(&a), argmax(&b));
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss(&[0.0, 1.0], 1).unwrap(), 0.0);
        assert!((loss(&[0.25; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!((loss(&[0.25, 0.75], 0).unwrap() - 1.3862943611198906).abs() < 1e-15);
        assert!((loss(&[0.0, 1.0], 0).unwrap() - 27.631021115928547).abs() < 1e-9);
        assert_eq!(loss(&[0.5, 0.5], 2).unwrap_err().kind(), "label");
    }

    #[test]
    fn confident_correct_prediction_has_zero_gradient() {
        let spec = PyramidSpec::new(1, PoolOp::Mean);
        let mut p = NetParams::zeros(2, 2, 2, spec);
        // exp(-800) underflows, so the softmax is exactly one-hot.
        p.b_b = vec![0.0, 800.0];
        let x = mat(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let (probs, cache) = forward(&x, &p).unwrap();
        assert_eq!(probs, vec![0.0, 1.0]);
        assert!(backward(&p, &cache, 1).unwrap().is_zero());
    }

    fn instance_loss(p: &NetParams, x: &Matrix, label: usize) -> f64 {
        loss(&predict(p, x).unwrap(), label).unwrap()
    }

    fn check_gradients(n: usize, spec: PyramidSpec, seed: u64) -> f64 {
        let p = random_params(4, 6, 3, spec, seed);
        let x = Matrix::gaussian(n, 4, 1.0, &mut seeded_rng(seed + 100));
        let label = (seed % 3) as usize;
        let (_, cache) = forward(&x, &p).unwrap();
        let g = backward(&p, &cache, label).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let tensors: [(&[f64], fn(&mut NetParams) -> &mut [f64]); 4] = [
            (g.w_a.as_slice(), |q| q.w_a.as_mut_slice()),
            (&g.b_a, |q| &mut q.b_a),
            (g.w_b.as_slice(), |q| q.w_b.as_mut_slice()),
            (&g.b_b, |q| &mut q.b_b),
        ];
        for (analytic, access) in tensors {
            for (i, &a) in analytic.iter().enumerate() {
                let mut plus = p.clone();
                access(&mut plus)[i] += h;
                let mut minus = p.clone();
                access(&mut minus)[i] -= h;
                let numeric = (instance_loss(&plus, &x, label) - instance_loss(&minus, &x, label)) / (2.0 * h);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (i, n) in [3, 7, 12].into_iter().enumerate() {
            for pool in [PoolOp::Mean, PoolOp::Max] {
                for b in [0, 2] {
                    let err = check_gradients(n, PyramidSpec::new(b, pool), 10 + i as u64);
                    assert!(err < 1e-4, "n={n} b={b} {pool:?}: {err}");
                }
            }
        }
    }

    #[test]
    fn max_pool_gradient_skips_losing_frames() {
        let spec = PyramidSpec::new(0, PoolOp::Max);
        let p = random_params(3, 4, 2, spec, 2);
        let x = Matrix::gaussian(5, 3, 1.0, &mut seeded_rng(3));
        let (_, cache) = forward(&x, &p).unwrap();
        let winners: std::collections::HashSet<usize> = cache.trace.argmax.iter().copied().collect();
        let grad_pooled = vec![1.0; cache.pooled.len()];
        let g = tpp_backward(&cache.trace, &grad_pooled, 5, 4);
        for r in 0..5 {
            if !winners.contains(&r) {
                assert!(g.row(r).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn sgd_examples() {
        let spec = PyramidSpec::new(0, PoolOp::Mean);
        let base = NetParams::init(1, 1, 1, spec, 0);
        let mut grads = Gradients::zeros_like(&base);
        grads.w_a.set(0, 0, 2.0);
        grads.b_b[0] = -1.0;
        let mut p = base.clone();
        let mut v = Gradients::zeros_like(&p);
        sgd_step(&mut p, &grads, &mut v, SgdConfig { learning_rate: 0.5, momentum: 0.0, weight_decay: 0.0 });
        assert_eq!(p.w_a.get(0, 0), base.w_a.get(0, 0) - 1.0);
        assert_eq!(p.b_b[0], 0.5);

        let mut p = base.clone();
        let mut v = Gradients::zeros_like(&p);
        sgd_step(&mut p, &Gradients::zeros_like(&base), &mut v, SgdConfig { learning_rate: 0.5, momentum: 0.9, weight_decay: 0.0 });
        assert_eq!(p, base);

        // Two momentum steps on a constant unit gradient: −0.1 then −0.19.
        let mut p = NetParams::zeros(1, 1, 1, spec);
        let mut g = Gradients::zeros_like(&p);
        g.b_b[0] = 1.0;
        let mut v = Gradients::zeros_like(&p);
        let cfg = SgdConfig { learning_rate: 0.1, momentum: 0.9, weight_decay: 0.0 };
        sgd_step(&mut p, &g, &mut v, cfg);
        assert!((p.b_b[0] + 0.1).abs() < 1e-15);
        sgd_step(&mut p, &g, &mut v, cfg);
        assert!((v.b_b[0] + 0.19).abs() < 1e-15);
        assert!((p.b_b[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_skips_biases() {
        let spec = PyramidSpec::new(0, PoolOp::Mean);
        let mut p = NetParams::zeros(1, 1, 1, spec);
        p.w_a.set(0, 0, 1.0);
        p.b_a[0] = 1.0;
        let g = Gradients::zeros_like(&p);
        let mut v = Gradients::zeros_like(&p);
        sgd_step(&mut p, &g, &mut v, SgdConfig { learning_rate: 0.1, momentum: 0.0, weight_decay: 0.5 });
        assert!((p.w_a.get(0, 0) - 0.95).abs() < 1e-15);
        assert_eq!(p.b_a[0], 1.0);
    }

    fn toy_data(seed: u64) -> Vec<LabeledSequence> {
        let mut rng = seeded_rng(seed);
        (0..20)
            .map(|i| {
                let label = i % 2;
                let n = rng.random_range(3..9);
                let centre = if label == 0 { -1.0 } else { 1.0 };
                let rows: Vec<Vec<f64>> = (0..n)
                    .map(|_| vec![centre + rng.random_range(-0.3..0.3), rng.random_range(-1.0..1.0)])
                    .collect();
                LabeledSequence { frames: Matrix::from_rows(&rows).unwrap(), label }
            })
            .collect()
    }

    fn toy_config() -> TrainConfig {
        TrainConfig { learning_rate: 0.01, epochs: 20, hidden_dim: 8, pyramid: PyramidSpec::new(2, PoolOp::Mean), ..Default::default() }
    }

    #[test]
    fn zero_learning_rate_keeps_initialization() {
        let data = toy_data(1);
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 3, ..toy_config() };
        let out = train(&data, 2, &cfg).unwrap();
        let init = NetParams::init(2, 8, 2, cfg.pyramid, derive_seed(cfg.seed, 0));
        assert_eq!(out.params, init);
    }

    #[test]
    fn learns_separable_set_deterministically() {
        let data = toy_data(2);
        let cfg = toy_config();
        let a = train(&data, 2, &cfg).unwrap();
        let b = train(&data, 2, &cfg).unwrap();
        assert_eq!(a.params.to_bytes().unwrap(), b.params.to_bytes().unwrap());
        assert_eq!(a.epoch_losses, b.epoch_losses);
        for s in &data {
            assert_eq!(classify(&a.params, &s.frames).unwrap(), s.label);
        }
        let rising = a.epoch_losses.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(rising * 10 <= a.epoch_losses.len() - 1, "{:?}", a.epoch_losses);
    }

    #[test]
    fn train_rejects_bad_input() {
        let cfg = toy_config();
        assert_eq!(train(&[], 2, &cfg).unwrap_err().kind(), "config");
        let mut data = toy_data(3);
        assert_eq!(train(&data, 3, &cfg).unwrap_err().kind(), "label");
        data[1].frames = Matrix::zeros(2, 5);
        assert_eq!(train(&data, 2, &cfg).unwrap_err().kind(), "shape");
        let bad = TrainConfig { momentum: 1.0, ..cfg };
        assert_eq!(train(&toy_data(3), 2, &bad).unwrap_err().kind(), "config");
    }

    #[test]
    fn params_round_trip() {
        let p = random_params(3, 4, 2, PyramidSpec::new(3, PoolOp::Max), 8);
        let bytes = p.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"TPNP");
        let path = Path::new("net.bin");
        assert_eq!(NetParams::from_bytes(path, &bytes).unwrap(), p);
        assert!(NetParams::from_bytes(path, &bytes[..bytes.len() - 8]).is_err());
        let mut bad = bytes.clone();
        bad[20] = 7;
        assert!(NetParams::from_bytes(path, &bad).is_err());
    }
}
