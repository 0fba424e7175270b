//! Feature-matrix encoder, pose predictor and keypoint pairing.
//!
//! Three consecutive feature matrices (3 antennas x 256 subcarriers, phase and
//! amplitude) are condensed to a `150 x 3 x 3` grid and bilinearly upsampled to
//! `150 x 144 x 144`. A ridge-regression baseline maps the tensor to a
//! `2 x 18 x 18` pose adjacency matrix whose diagonals are the keypoints.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::channel::{self, NoiseLevel, PhaseErrorModel, Point, Scene};
use crate::error::{mismatch, Error, Result};
use crate::smsp::{self, FeatureMatrix, SmspConfig};

pub const ENCODED_ROWS: usize = 150;
pub const ENCODED_SIDE: usize = 144;
pub const SOURCE_SUBCARRIERS: usize = 256;
pub const SOURCE_ANTENNAS: usize = 3;
pub const TIME_SAMPLES: usize = 3;
/// Rows dropped at each band edge of the phase and amplitude halves.
pub const EDGE_ROWS: usize = 12;
pub const KEYPOINTS: usize = 18;
pub const POSE_LEN: usize = 2 * KEYPOINTS * KEYPOINTS;

const ROWS_PER_HALF: usize = ENCODED_ROWS / 2;
const KEPT_PER_HALF: usize = SOURCE_SUBCARRIERS - 2 * EDGE_ROWS;

/// Source-row index (into one 256-row half) of each of the 75 kept rows.
pub fn row_index_map() -> Vec<usize> {
    (0..ROWS_PER_HALF)
        .map(|i| EDGE_ROWS + ((i * (KEPT_PER_HALF - 1)) as f64 / (ROWS_PER_HALF - 1) as f64).round() as usize)
        .collect()
}

/// Condensed encoder input, `150 x 3 (antenna) x 3 (time)`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceGrid {
    pub values: Vec<f64>,
}

impl SourceGrid {
    pub fn get(&self, row: usize, antenna: usize, time: usize) -> f64 {
        self.values[(row * SOURCE_ANTENNAS + antenna) * TIME_SAMPLES + time]
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        let n = ENCODED_ROWS * SOURCE_ANTENNAS * TIME_SAMPLES;
        if values.len() != n {
            return Err(mismatch(n, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("source grid has non-finite entries".into()));
        }
        Ok(Self { values })
    }
}

/// Stack phase over amplitude, drop band edges, keep 75 rows per half and
/// place the three time samples side by side.
pub fn condense(features: &[FeatureMatrix]) -> Result<SourceGrid> {
    if features.len() != TIME_SAMPLES {
        return Err(Error::DimensionMismatch {
            expected: format!("{TIME_SAMPLES} time samples"),
            found: features.len().to_string(),
        });
    }
    for f in features {
        let want = (SOURCE_ANTENNAS, SOURCE_SUBCARRIERS);
        if f.h_ph.shape() != want || f.h_am.shape() != want {
            return Err(mismatch(format!("{want:?}"), format!("{:?}", f.h_ph.shape())));
        }
    }
    let map = row_index_map();
    let mut values = Vec::with_capacity(ENCODED_ROWS * SOURCE_ANTENNAS * TIME_SAMPLES);
    for half in 0..2 {
        for &sc in &map {
            for a in 0..SOURCE_ANTENNAS {
                for f in features {
                    let m = if half == 0 { &f.h_ph } else { &f.h_am };
                    values.push(m[(a, sc)]);
                }
            }
        }
    }
    SourceGrid::from_values(values)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 1.0 {
        b
    } else {
        a + t * (b - a)
    }
}

/// Bilinear interpolation on a unit-spaced grid cell:
/// `(1-dr)(1-dc) h11 + (1-dr) dc h12 + dr (1-dc) h21 + dr dc h22`,
/// evaluated as nested lerps so constants and grid nodes come out exact.
pub fn bilinear(h11: f64, h12: f64, h21: f64, h22: f64, dr: f64, dc: f64) -> f64 {
    lerp(lerp(h11, h12, dc), lerp(h21, h22, dc), dr)
}

/// Sample a 3x3 slice at fractional source coordinates `(r, c)` in `[0, 2]`.
pub fn sample_slice(slice: &[f64; 9], r: f64, c: f64) -> f64 {
    let r0 = (r.floor() as usize).min(1);
    let c0 = (c.floor() as usize).min(1);
    let (dr, dc) = (r - r0 as f64, c - c0 as f64);
    let at = |i: usize, j: usize| slice[i * 3 + j];
    bilinear(at(r0, c0), at(r0, c0 + 1), at(r0 + 1, c0), at(r0 + 1, c0 + 1), dr, dc)
}

/// Source coordinate of output index `o`; corners align with corners.
pub fn source_coord(o: usize) -> f64 {
    o as f64 * 2.0 / (ENCODED_SIDE - 1) as f64
}

/// `150 x 144 x 144` network input, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTensor {
    pub values: Vec<f64>,
}

impl EncodedTensor {
    pub const SHAPE: [usize; 3] = [ENCODED_ROWS, ENCODED_SIDE, ENCODED_SIDE];

    pub fn shape(&self) -> [usize; 3] {
        Self::SHAPE
    }

    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.values[(k * ENCODED_SIDE + i) * ENCODED_SIDE + j]
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        let n = ENCODED_SIDE * ENCODED_SIDE;
        &self.values[k * n..(k + 1) * n]
    }

    /// Mean of every 144x144 slice.
    pub fn pooled(&self) -> Vec<f64> {
        (0..ENCODED_ROWS)
            .map(|k| self.slice(k).iter().sum::<f64>() / (ENCODED_SIDE * ENCODED_SIDE) as f64)
            .collect()
    }
}

pub fn interpolate(grid: &SourceGrid) -> EncodedTensor {
    let coords: Vec<f64> = (0..ENCODED_SIDE).map(source_coord).collect();
    let mut values = Vec::with_capacity(ENCODED_ROWS * ENCODED_SIDE * ENCODED_SIDE);
    for k in 0..ENCODED_ROWS {
        let mut slice = [0.0; 9];
        slice.copy_from_slice(&grid.values[k * 9..(k + 1) * 9]);
        for &r in &coords {
            for &c in &coords {
                values.push(sample_slice(&slice, r, c));
            }
        }
    }
    EncodedTensor { values }
}

pub fn encode_features(features: &[FeatureMatrix]) -> Result<EncodedTensor> {
    Ok(interpolate(&condense(features)?))
}

/// `2 x 18 x 18` pose adjacency matrix; channel 0 holds X, channel 1 holds Y.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseAdjacency {
    pub values: Vec<f64>,
}

impl PoseAdjacency {
    pub fn zeros() -> Self {
        Self { values: vec![0.0; POSE_LEN] }
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.len() != POSE_LEN {
            return Err(mismatch(POSE_LEN, values.len()));
        }
        Ok(Self { values })
    }

    fn idx(ch: usize, p: usize, q: usize) -> usize {
        (ch * KEYPOINTS + p) * KEYPOINTS + q
    }

    pub fn get(&self, ch: usize, p: usize, q: usize) -> f64 {
        self.values[Self::idx(ch, p, q)]
    }

    pub fn set(&mut self, ch: usize, p: usize, q: usize, v: f64) {
        self.values[Self::idx(ch, p, q)] = v;
    }

    /// Keypoints on the diagonals; limb midpoints at connected pairs.
    pub fn from_points(points: &SkeletonPoints) -> Self {
        let mut v = Self::zeros();
        for (p, pt) in points.points.iter().enumerate() {
            v.set(0, p, p, pt[0]);
            v.set(1, p, p, pt[1]);
        }
        for &(a, b) in LIMBS {
            for ch in 0..2 {
                let mid = (points.points[a][ch] + points.points[b][ch]) / 2.0;
                v.set(ch, a, b, mid);
                v.set(ch, b, a, mid);
            }
        }
        v
    }
}

/// Squared Frobenius norm of the difference (a sum, not a mean).
pub fn mse_loss(v_p: &PoseAdjacency, v_t: &PoseAdjacency) -> Result<f64> {
    if v_p.values.len() != v_t.values.len() {
        return Err(mismatch(v_t.values.len(), v_p.values.len()));
    }
    Ok(v_p.values.iter().zip(&v_t.values).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Per-entry mean of [`mse_loss`].
pub fn mean_squared_error(v_p: &PoseAdjacency, v_t: &PoseAdjacency) -> Result<f64> {
    Ok(mse_loss(v_p, v_t)? / POSE_LEN as f64)
}

/// 18 keypoints in normalized image coordinates, `[x, y]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonPoints {
    pub points: Vec<[f64; 2]>,
}

pub fn pair_skeleton(v: &PoseAdjacency) -> SkeletonPoints {
    SkeletonPoints {
        points: (0..KEYPOINTS).map(|p| [v.get(0, p, p), v.get(1, p, p)]).collect(),
    }
}

pub const KEYPOINT_NAMES: [&str; KEYPOINTS] = [
    "nose", "neck", "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow", "l_wrist", "r_hip", "r_knee",
    "r_ankle", "l_hip", "l_knee", "l_ankle", "r_eye", "l_eye", "r_ear", "l_ear",
];

pub const LIMBS: &[(usize, usize)] = &[
    (1, 2),
    (1, 5),
    (2, 3),
    (3, 4),
    (5, 6),
    (6, 7),
    (1, 8),
    (8, 9),
    (9, 10),
    (1, 11),
    (11, 12),
    (12, 13),
    (1, 0),
    (0, 14),
    (14, 16),
    (0, 15),
    (15, 17),
];

/// Standing pose in a unit box, feet at y = 1, head near y = 0.
const STANDING: [[f64; 2]; KEYPOINTS] = [
    [0.50, 0.08],
    [0.50, 0.20],
    [0.38, 0.21],
    [0.33, 0.36],
    [0.31, 0.50],
    [0.62, 0.21],
    [0.67, 0.36],
    [0.69, 0.50],
    [0.42, 0.52],
    [0.41, 0.76],
    [0.40, 1.00],
    [0.58, 0.52],
    [0.59, 0.76],
    [0.60, 1.00],
    [0.47, 0.06],
    [0.53, 0.06],
    [0.44, 0.07],
    [0.56, 0.07],
];

/// Geometric template for a user standing at `pos`: horizontal image position
/// follows x across the room, and the figure shrinks and rises with depth y.
pub fn template_skeleton(pos: Point, room_min: Point, room_max: Point) -> SkeletonPoints {
    let u = ((pos.x - room_min.x) / (room_max.x - room_min.x)).clamp(0.0, 1.0);
    let d = ((pos.y - room_min.y) / (room_max.y - room_min.y)).clamp(0.0, 1.0);
    let height = 0.6 - 0.3 * d;
    let feet = 0.95 - 0.3 * d;
    let cx = 0.2 + 0.6 * u;
    SkeletonPoints {
        points: STANDING
            .iter()
            .map(|[x, y]| [cx + (x - 0.5) * height, feet - (1.0 - y) * height])
            .collect(),
    }
}

/// Bounding box of the transmitter and receivers.
pub fn room_bounds(scene: &Scene) -> (Point, Point) {
    let pts = std::iter::once(scene.tx_pos).chain(scene.rx.iter().map(|r| r.pos));
    let (mut lo, mut hi) = (Point { x: f64::INFINITY, y: f64::INFINITY }, Point { x: f64::NEG_INFINITY, y: f64::NEG_INFINITY });
    for p in pts {
        lo.x = lo.x.min(p.x);
        lo.y = lo.y.min(p.y);
        hi.x = hi.x.max(p.x);
        hi.y = hi.y.max(p.y);
    }
    (lo, hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    LinearBaseline,
}

/// Linear map from pooled tensor summaries to pose adjacency entries.
///
/// `params` holds the `150 x 648` weight matrix (row-major) followed by the
/// 648 biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorModel {
    pub kind: PredictorKind,
    pub params: Vec<f64>,
    pub ridge: f64,
    pub samples: usize,
    pub epochs: usize,
    /// Training loss (summed squared error averaged over samples) per epoch.
    pub loss_curve: Vec<f64>,
    /// Per-entry mean squared error on the training set.
    pub train_mse: f64,
}

pub const PREDICTOR_PARAMS: usize = ENCODED_ROWS * POSE_LEN + POSE_LEN;

impl PredictorModel {
    /// Zero weights with the given bias.
    pub fn with_bias(bias: &PoseAdjacency) -> Self {
        let mut params = vec![0.0; ENCODED_ROWS * POSE_LEN];
        params.extend_from_slice(&bias.values);
        Self {
            kind: PredictorKind::LinearBaseline,
            params,
            ridge: 0.0,
            samples: 0,
            epochs: 0,
            loss_curve: Vec::new(),
            train_mse: f64::NAN,
        }
    }

    pub fn untrained() -> Self {
        Self {
            params: Vec::new(),
            ..Self::with_bias(&PoseAdjacency::zeros())
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.params.is_empty() {
            return Err(Error::Untrained);
        }
        if self.params.len() != PREDICTOR_PARAMS {
            return Err(mismatch(PREDICTOR_PARAMS, self.params.len()));
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("predictor has non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn weight(&self, row: usize, out: usize) -> f64 {
        self.params[row * POSE_LEN + out]
    }

    pub fn bias(&self) -> &[f64] {
        &self.params[ENCODED_ROWS * POSE_LEN..]
    }

    /// Frobenius norm of the weight matrix.
    pub fn weight_norm(&self) -> f64 {
        self.params[..ENCODED_ROWS * POSE_LEN].iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    /// Unclamped linear output for a pooled summary.
    pub fn raw_output(&self, pooled: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        if pooled.len() != ENCODED_ROWS {
            return Err(mismatch(ENCODED_ROWS, pooled.len()));
        }
        let mut out = self.bias().to_vec();
        for (k, x) in pooled.iter().enumerate() {
            if *x == 0.0 {
                continue;
            }
            let w = &self.params[k * POSE_LEN..(k + 1) * POSE_LEN];
            for (o, wv) in out.iter_mut().zip(w) {
                *o += x * wv;
            }
        }
        Ok(out)
    }

    pub fn predict_pooled(&self, pooled: &[f64]) -> Result<PoseAdjacency> {
        let out = self.raw_output(pooled)?;
        PoseAdjacency::from_values(out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }
}

pub fn predict(model: &PredictorModel, x: &EncodedTensor) -> Result<PoseAdjacency> {
    model.predict_pooled(&x.pooled())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    /// Ridge penalty on the weights (the bias is not penalized).
    pub ridge: f64,
    /// Singular values below this fraction of the largest are discarded.
    pub rcond: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { ridge: 1e-9, rcond: 1e-12 }
    }
}

/// Training pair: pooled tensor summary and target adjacency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub pooled: Vec<f64>,
    pub target: PoseAdjacency,
}

impl Sample {
    pub fn new(x: &EncodedTensor, target: PoseAdjacency) -> Self {
        Self { pooled: x.pooled(), target }
    }
}

/// Closed-form ridge fit on centered data via SVD.
pub fn fit_baseline(data: &[Sample], cfg: &FitConfig) -> Result<PredictorModel> {
    if data.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "fitting needs at least 2 samples, got {}",
            data.len()
        )));
    }
    if !(cfg.ridge >= 0.0 && cfg.rcond >= 0.0) {
        return Err(Error::InvalidArgument("ridge and rcond must be non-negative".into()));
    }
    for s in data {
        if s.pooled.len() != ENCODED_ROWS {
            return Err(mismatch(ENCODED_ROWS, s.pooled.len()));
        }
        if s.target.values.len() != POSE_LEN {
            return Err(mismatch(POSE_LEN, s.target.values.len()));
        }
    }
    let n = data.len();
    let mut x_mean = vec![0.0; ENCODED_ROWS];
    let mut y_mean = vec![0.0; POSE_LEN];
    for s in data {
        for (m, v) in x_mean.iter_mut().zip(&s.pooled) {
            *m += v / n as f64;
        }
        for (m, v) in y_mean.iter_mut().zip(&s.target.values) {
            *m += v / n as f64;
        }
    }
    let x = DMatrix::from_fn(n, ENCODED_ROWS, |i, j| data[i].pooled[j] - x_mean[j]);
    let y = DMatrix::from_fn(n, POSE_LEN, |i, j| data[i].target.values[j] - y_mean[j]);
    let svd = x.svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let s_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let factors = svd
        .singular_values
        .map(|s| if s > cfg.rcond * s_max && s > 0.0 { s / (s * s + cfg.ridge) } else { 0.0 });
    let uty = u.transpose() * &y;
    let scaled = DMatrix::from_fn(uty.nrows(), POSE_LEN, |i, j| factors[i] * uty[(i, j)]);
    let w = v_t.transpose() * scaled;

    let mut params = Vec::with_capacity(PREDICTOR_PARAMS);
    for k in 0..ENCODED_ROWS {
        for o in 0..POSE_LEN {
            params.push(w[(k, o)]);
        }
    }
    for o in 0..POSE_LEN {
        let shift: f64 = (0..ENCODED_ROWS).map(|k| x_mean[k] * w[(k, o)]).sum();
        params.push(y_mean[o] - shift);
    }
    let mut model = PredictorModel {
        params,
        ridge: cfg.ridge,
        samples: n,
        epochs: 1,
        ..PredictorModel::untrained()
    };
    let (loss, mse) = evaluate(&model, data)?;
    model.loss_curve = vec![loss];
    model.train_mse = mse;
    Ok(model)
}

/// Mean summed loss and per-entry mean squared error over a dataset.
pub fn evaluate(model: &PredictorModel, data: &[Sample]) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let mut total = 0.0;
    for s in data {
        total += mse_loss(&model.predict_pooled(&s.pooled)?, &s.target)?;
    }
    let loss = total / data.len() as f64;
    Ok((loss, loss / POSE_LEN as f64))
}

/// Per-entry MSE of always predicting the mean target.
pub fn mean_predictor_mse(data: &[Sample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let n = data.len() as f64;
    let mut mean = PoseAdjacency::zeros();
    for s in data {
        for (m, v) in mean.values.iter_mut().zip(&s.target.values) {
            *m += v / n;
        }
    }
    let mut total = 0.0;
    for s in data {
        total += mean_squared_error(&mean, &s.target)?;
    }
    Ok(total / n)
}

/// Settings for simulating one training sample from a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSimConfig {
    pub noise: NoiseLevel,
    pub phase_errors: PhaseErrorModel,
    pub smsp: SmspConfig,
}

impl Default for SampleSimConfig {
    fn default() -> Self {
        Self {
            noise: NoiseLevel::SnrDb(20.0),
            phase_errors: PhaseErrorModel::UniformPerFrame,
            smsp: SmspConfig::default(),
        }
    }
}

/// Simulate three frames with the user at the scene's position, run the
/// perception pipeline and return the condensed encoder input.
pub fn simulate_source(scene: &Scene, cfg: &SampleSimConfig, seed: u64) -> Result<SourceGrid> {
    let mut truth = channel::ground_truth_paths(scene)?;
    channel::randomize_phases(&mut truth, seed);
    let streams = channel::synthesize_csi(scene, &truth, cfg.noise, cfg.phase_errors, TIME_SAMPLES, seed)?;
    let out = smsp::run_smsp(scene, &streams, &cfg.smsp, Some(&truth))?;
    condense(&out.features)
}
