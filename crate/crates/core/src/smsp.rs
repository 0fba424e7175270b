//! Sequential multi-scale perception: user localization, link scores,
//! rotation of the user reflection and feature-matrix construction.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{noiseless_frame, path_response, CsiStream, PathKind, PathSpec, Point, Scene, SPEED_OF_LIGHT};
use crate::cmatrix::{self, CMatrix, RMatrix};
use crate::error::{mismatch, Error, Result};
use crate::spectral::{estimate_paths, MusicConfig, PathEstimate, Peak};

/// Links closer than this (meters) are treated as passing through the user.
pub const MIN_LINK_DISTANCE_M: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizeConfig {
    /// Weight of the squared path-length residual relative to the bearing residual.
    pub tof_weight: f64,
    pub margin_m: f64,
    pub coarse_step_m: f64,
    /// Peaks this close to the predicted direct path are not user candidates.
    pub direct_exclusion_deg: f64,
    pub direct_exclusion_ns: f64,
    /// Number of coarse-grid minima refined by compass search.
    pub refine_starts: usize,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            tof_weight: 1.0,
            margin_m: 2.0,
            coarse_step_m: 0.25,
            direct_exclusion_deg: 3.0,
            direct_exclusion_ns: 5.0,
            refine_starts: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserLocation {
    pub pos: Point,
    /// RMS of the per-receiver residuals, meters.
    pub residual_m: f64,
    /// Index into each receiver's peak list of the path attributed to the user.
    pub selected: Vec<Option<usize>>,
}

struct Candidate {
    rx: usize,
    peak: usize,
    aoa: f64,
    path_len: f64,
}

fn user_candidates(estimates: &[PathEstimate], scene: &Scene, cfg: &LocalizeConfig) -> Vec<Vec<Candidate>> {
    scene
        .rx
        .iter()
        .zip(estimates)
        .enumerate()
        .map(|(q, (rx, est))| {
            let all: Vec<Candidate> = est
                .peaks
                .iter()
                .enumerate()
                .map(|(k, p)| Candidate {
                    rx: q,
                    peak: k,
                    aoa: p.aoa_rad,
                    path_len: p.tof_s * SPEED_OF_LIGHT,
                })
                .collect();
            if !scene.include_direct {
                return all;
            }
            let direct_aoa = rx.aoa_of(&scene.tx_pos);
            let direct_len = scene.tx_pos.distance(&rx.pos);
            let is_direct = |c: &Candidate| {
                (c.aoa - direct_aoa).abs().to_degrees() < cfg.direct_exclusion_deg
                    && ((c.path_len - direct_len) / SPEED_OF_LIGHT * 1e9).abs() < cfg.direct_exclusion_ns
            };
            if all.iter().all(is_direct) {
                all
            } else {
                all.into_iter().filter(|c| !is_direct(c)).collect()
            }
        })
        .collect()
}

fn candidate_residual(scene: &Scene, c: &Candidate, p: &Point, tof_weight: f64) -> f64 {
    let rx = &scene.rx[c.rx];
    let range = rx.pos.distance(p);
    let bearing = range * (rx.aoa_of(p) - c.aoa).sin();
    let length = c.path_len - (scene.tx_pos.distance(p) + range);
    bearing * bearing + tof_weight * length * length
}

/// Sum over receivers of the best candidate's squared residual.
fn location_cost(scene: &Scene, cands: &[Vec<Candidate>], p: &Point, w: f64) -> f64 {
    cands
        .iter()
        .filter(|c| !c.is_empty())
        .map(|cs| cs.iter().map(|c| candidate_residual(scene, c, p, w)).fold(f64::INFINITY, f64::min))
        .sum()
}

/// Locate the user from per-receiver path estimates.
pub fn localize_user(estimates: &[PathEstimate], scene: &Scene, cfg: &LocalizeConfig) -> Result<UserLocation> {
    scene.validate()?;
    if estimates.len() != scene.rx.len() {
        return Err(mismatch(scene.rx.len(), estimates.len()));
    }
    if !(cfg.coarse_step_m > 0.0) || !(cfg.margin_m >= 0.0) || !(cfg.tof_weight >= 0.0) {
        return Err(Error::InvalidArgument("invalid localization settings".into()));
    }
    let cands = user_candidates(estimates, scene, cfg);
    let used = cands.iter().filter(|c| !c.is_empty()).count();
    if used < 2 {
        return Err(Error::UnderDetermined(format!(
            "{used} receiver(s) with user-path candidates, need at least 2"
        )));
    }
    // Bearings: orientation + aoa. Every cross-receiver pair parallel means no fix.
    let bearings: Vec<(usize, f64)> = cands
        .iter()
        .flatten()
        .map(|c| (c.rx, scene.rx[c.rx].array_orientation_rad + c.aoa))
        .collect();
    let crossing = bearings
        .iter()
        .any(|&(q, a)| bearings.iter().any(|&(q2, b)| q2 != q && (a - b).sin().abs() >= 1e-3));
    if !crossing {
        return Err(Error::UnderDetermined("all candidate bearings are parallel".into()));
    }

    let mut xs = vec![scene.tx_pos.x];
    let mut ys = vec![scene.tx_pos.y];
    for rx in &scene.rx {
        xs.push(rx.pos.x);
        ys.push(rx.pos.y);
    }
    let lo = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min) - cfg.margin_m;
    let hi = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + cfg.margin_m;
    let (x0, x1, y0, y1) = (lo(&xs), hi(&xs), lo(&ys), hi(&ys));
    let nx = ((x1 - x0) / cfg.coarse_step_m).floor() as usize + 1;
    let ny = ((y1 - y0) / cfg.coarse_step_m).floor() as usize + 1;
    let w = cfg.tof_weight;
    let mut coarse: Vec<(f64, usize)> = (0..nx * ny)
        .into_par_iter()
        .map(|i| {
            let p = Point::new(x0 + (i / ny) as f64 * cfg.coarse_step_m, y0 + (i % ny) as f64 * cfg.coarse_step_m);
            (location_cost(scene, &cands, &p, w), i)
        })
        .collect();
    coarse.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut best: Option<(f64, Point)> = None;
    for &(_, i) in coarse.iter().take(cfg.refine_starts.max(1)) {
        let mut p = Point::new(x0 + (i / ny) as f64 * cfg.coarse_step_m, y0 + (i % ny) as f64 * cfg.coarse_step_m);
        let mut cost = location_cost(scene, &cands, &p, w);
        let mut step = cfg.coarse_step_m / 2.0;
        while step > 1e-6 {
            let mut moved = false;
            for (dx, dy) in [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)] {
                let q = Point::new(p.x + dx * step, p.y + dy * step);
                let c = location_cost(scene, &cands, &q, w);
                if c < cost {
                    cost = c;
                    p = q;
                    moved = true;
                    break;
                }
            }
            if !moved {
                step /= 2.0;
            }
        }
        if best.as_ref().is_none_or(|(b, _)| cost < *b) {
            best = Some((cost, p));
        }
    }
    let (cost, pos) = best.expect("at least one start");
    let selected = cands
        .iter()
        .map(|cs| {
            cs.iter()
                .map(|c| (candidate_residual(scene, c, &pos, w), c.peak))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .map(|(_, k)| k)
        })
        .collect();
    Ok(UserLocation {
        pos,
        residual_m: (cost / used as f64).sqrt(),
        selected,
    })
}

/// Perpendicular distance from `p` to the line through `a` and `b`.
pub fn point_line_distance(p: &Point, a: &Point, b: &Point) -> f64 {
    let dy = b.y - a.y;
    let dx = b.x - a.x;
    let len = dx.hypot(dy);
    if len == 0.0 {
        return p.distance(a);
    }
    (dy * p.x - dx * p.y + b.x * a.y - b.y * a.x).abs() / len
}

/// Distance from the user to every tx-rx link.
pub fn link_distances(user: &Point, scene: &Scene) -> Vec<f64> {
    scene.rx.iter().map(|rx| point_line_distance(user, &scene.tx_pos, &rx.pos)).collect()
}

/// `min(D) / D_q` with distances clamped below at [`MIN_LINK_DISTANCE_M`].
pub fn scores_from_distances(distances: &[f64]) -> Vec<f64> {
    let clamped: Vec<f64> = distances.iter().map(|d| d.max(MIN_LINK_DISTANCE_M)).collect();
    let min = clamped.iter().cloned().fold(f64::INFINITY, f64::min);
    clamped.iter().map(|d| min / d).collect()
}

pub fn large_scale_scores(user: &Point, scene: &Scene) -> Vec<f64> {
    scores_from_distances(&link_distances(user, scene))
}

/// `|sum_mn w_mn H_mn|^2` for every frame, steering towards `theta`.
pub fn beam_power_series(stream: &CsiStream, theta: f64, scene: &Scene) -> Result<Vec<f64>> {
    let dims = (scene.n_antennas, scene.n_subcarriers);
    let weights = CMatrix::from_fn(dims.0, dims.1, |m, n| {
        let phase = 2.0 * PI * scene.antenna_term_freq(n) * m as f64 * scene.antenna_spacing_m * theta.sin()
            / SPEED_OF_LIGHT;
        Complex64::from_polar(1.0, phase)
    });
    stream
        .frames
        .iter()
        .map(|f| {
            if f.shape() != dims {
                return Err(mismatch(format!("{dims:?}"), format!("{:?}", f.shape())));
            }
            let s: Complex64 = f.as_slice().iter().zip(weights.as_slice()).map(|(h, w)| h * w).sum();
            Ok(s.norm_sqr())
        })
        .collect()
}

pub fn unbiased_variance(x: &[f64]) -> Result<f64> {
    if x.len() < 2 {
        return Err(Error::InvalidArgument("variance needs at least 2 samples".into()));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    Ok(x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0))
}

/// Variance of each series relative to the largest; all zeros if nothing fluctuates.
pub fn scores_from_variances(variances: &[f64]) -> Vec<f64> {
    let max = variances.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return vec![0.0; variances.len()];
    }
    variances.iter().map(|v| v / max).collect()
}

pub fn small_scale_scores(series: &[Vec<f64>]) -> Result<Vec<f64>> {
    let variances = series.iter().map(|s| unbiased_variance(s)).collect::<Result<Vec<_>>>()?;
    Ok(scores_from_variances(&variances))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkScores {
    pub s1: Vec<f64>,
    pub s2: Vec<f64>,
}

impl LinkScores {
    pub fn weights(&self) -> Vec<f64> {
        self.s1.iter().zip(&self.s2).map(|(a, b)| a + b).collect()
    }
}

/// Rotation factors `F[m][n] = exp(+j 2 pi f_n (tau + m k sin(theta) / c))`.
pub fn rotation_matrix(theta: f64, tau: f64, scene: &Scene) -> CMatrix {
    CMatrix::from_fn(scene.n_antennas, scene.n_subcarriers, |m, n| path_response(scene, theta, tau, m, n).conj())
}

pub fn rotate_csi(frame: &CMatrix, theta: f64, tau: f64, scene: &Scene) -> Result<CMatrix> {
    frame.hadamard(&rotation_matrix(theta, tau, scene))
}

/// Least-squares complex amplitudes of the given (aoa, tof) paths in `frame`.
pub fn path_amplitudes(frame: &CMatrix, paths: &[(f64, f64)], scene: &Scene) -> Option<Vec<Complex64>> {
    let (m, n) = frame.shape();
    let basis: Vec<Vec<Complex64>> = paths
        .iter()
        .map(|&(th, ta)| {
            (0..m)
                .flat_map(|a| (0..n).map(move |s| (a, s)))
                .map(|(a, s)| path_response(scene, th, ta, a, s))
                .collect()
        })
        .collect();
    let gram = CMatrix::from_fn(paths.len(), paths.len(), |i, j| cmatrix::dot_conj(&basis[i], &basis[j]));
    let rhs: Vec<Complex64> = basis.iter().map(|b| cmatrix::dot_conj(b, frame.as_slice())).collect();
    cmatrix::solve(&gram, &rhs)
}

/// Unit phase that moves the user path's least-squares amplitude onto the
/// positive real axis. The fit covers every estimated path jointly, so it also
/// absorbs the per-frame phase error.
pub fn alignment_phase(frame: &CMatrix, peaks: &[Peak], user: usize, scene: &Scene) -> Complex64 {
    let params: Vec<(f64, f64)> = peaks.iter().map(|p| (p.aoa_rad, p.tof_s)).collect();
    path_amplitudes(frame, &params, scene)
        .and_then(|amps| amps.get(user).copied())
        .filter(|b| b.norm() > 0.0)
        .map_or(Complex64::new(1.0, 0.0), |b| b.conj() / b.norm())
}

/// Rotate with estimated parameters, then remove the residual phase of the
/// user path so it lands on the positive real axis.
pub fn rotate_and_align(frame: &CMatrix, peaks: &[Peak], user: usize, scene: &Scene) -> Result<CMatrix> {
    let target = peaks
        .get(user)
        .ok_or_else(|| Error::InvalidArgument(format!("no peak {user} to align to")))?;
    let rotated = rotate_csi(frame, target.aoa_rad, target.tof_s, scene)?;
    let phase = alignment_phase(frame, peaks, user, scene);
    Ok(rotated.map(|z| z * phase))
}

/// Score-weighted phase and amplitude maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub h_ph: RMatrix,
    pub h_am: RMatrix,
}

impl FeatureMatrix {
    pub fn shape(&self) -> (usize, usize) {
        self.h_ph.shape()
    }
}

fn check_frames(frames: &[CMatrix], scores: &LinkScores) -> Result<(usize, usize)> {
    if scores.s1.len() != frames.len() || scores.s2.len() != frames.len() {
        return Err(mismatch(frames.len(), scores.s1.len().min(scores.s2.len())));
    }
    let shape = frames
        .first()
        .map(CMatrix::shape)
        .ok_or_else(|| Error::InvalidArgument("at least one receiver frame is required".into()))?;
    if let Some(bad) = frames.iter().find(|f| f.shape() != shape) {
        return Err(mismatch(format!("{shape:?}"), format!("{:?}", bad.shape())));
    }
    Ok(shape)
}

pub fn build_feature_matrix(rotated: &[CMatrix], scores: &LinkScores) -> Result<FeatureMatrix> {
    let (m, n) = check_frames(rotated, scores)?;
    let weights = scores.weights();
    let mut h_ph = RMatrix::zeros(m, n);
    let mut h_am = RMatrix::zeros(m, n);
    // Fixed receiver order keeps the sums reproducible.
    for (frame, w) in rotated.iter().zip(&weights) {
        for r in 0..m {
            for c in 0..n {
                let z = frame[(r, c)];
                h_ph[(r, c)] += w * z.arg();
                h_am[(r, c)] += w * z.norm();
            }
        }
    }
    Ok(FeatureMatrix { h_ph, h_am })
}

/// Complex score-weighted sum of rotated frames.
pub fn coherent_sum(rotated: &[CMatrix], scores: &LinkScores) -> Result<CMatrix> {
    let (m, n) = check_frames(rotated, scores)?;
    let mut out = CMatrix::zeros(m, n);
    for (frame, w) in rotated.iter().zip(scores.weights()) {
        out = out.add(&frame.scale(w))?;
    }
    Ok(out)
}

/// `|sum q| / sum |q|` over receivers, per element, then averaged.
/// Equals 1 when every component points the same way.
pub fn coherence_ratio(components: &[CMatrix]) -> Result<f64> {
    let first = components
        .first()
        .ok_or_else(|| Error::InvalidArgument("at least one component is required".into()))?;
    let len = first.as_slice().len();
    let mut sum = vec![Complex64::new(0.0, 0.0); len];
    let mut mags = vec![0.0; len];
    for c in components {
        if c.shape() != first.shape() {
            return Err(mismatch(format!("{:?}", first.shape()), format!("{:?}", c.shape())));
        }
        for (i, z) in c.as_slice().iter().enumerate() {
            sum[i] += z;
            mags[i] += z.norm();
        }
    }
    let total: f64 = mags.iter().sum();
    if total == 0.0 {
        return Ok(1.0);
    }
    Ok(sum.iter().map(|z| z.norm()).sum::<f64>() / total)
}

/// Energy of `combined` along the direction of `reference`.
pub fn projected_energy(combined: &CMatrix, reference: &CMatrix) -> Result<f64> {
    if combined.shape() != reference.shape() {
        return Err(mismatch(format!("{:?}", reference.shape()), format!("{:?}", combined.shape())));
    }
    let rn = reference.frobenius_norm();
    if rn == 0.0 {
        return Ok(0.0);
    }
    Ok(cmatrix::dot_conj(reference.as_slice(), combined.as_slice()).norm_sqr() / (rn * rn))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationMode {
    Disabled,
    /// Estimated (aoa, tof) followed by residual phase alignment.
    #[default]
    Estimated,
    /// Estimated (aoa, tof) only.
    EstimatedNoAlign,
    /// Ground-truth user path parameters (debugging / property tests).
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmspConfig {
    pub music: MusicConfig,
    pub localize: LocalizeConfig,
    pub rotation: RotationMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceiverReport {
    pub receiver_id: usize,
    pub estimated_paths: usize,
    pub estimate: PathEstimate,
    pub user_peak: Option<Peak>,
    pub beam_bearing_rad: f64,
    pub beam_powers: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmspOutput {
    pub receivers: Vec<ReceiverReport>,
    pub location: UserLocation,
    pub scores: LinkScores,
    /// One feature matrix per frame.
    pub features: Vec<FeatureMatrix>,
}

/// Operation applied to one frame: elementwise factors then a scalar phase.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRotation {
    pub factors: Option<CMatrix>,
    pub phase: Complex64,
}

impl FrameRotation {
    pub fn identity() -> Self {
        Self {
            factors: None,
            phase: Complex64::new(1.0, 0.0),
        }
    }

    pub fn apply(&self, m: &CMatrix) -> Result<CMatrix> {
        let rotated = match &self.factors {
            Some(f) => m.hadamard(f)?,
            None => m.clone(),
        };
        Ok(rotated.map(|z| z * self.phase))
    }
}

/// Rotation the pipeline applies to frame `u` of a receiver.
///
/// Ground-truth mode uses the true user path and also removes the frame's
/// true phase error, so it needs `truth_user`.
pub fn frame_rotation(
    stream: &CsiStream,
    u: usize,
    report: &ReceiverReport,
    scene: &Scene,
    mode: RotationMode,
    truth_user: Option<&PathSpec>,
) -> Result<FrameRotation> {
    let frame = stream
        .frames
        .get(u)
        .ok_or_else(|| Error::InvalidArgument(format!("frame {u} out of range")))?;
    match mode {
        RotationMode::Disabled => Ok(FrameRotation::identity()),
        RotationMode::GroundTruth => {
            let truth = truth_user
                .ok_or_else(|| Error::InvalidArgument("ground-truth rotation needs the true paths".into()))?;
            let eps = stream.phase_errors_rad.get(u).copied().unwrap_or(0.0);
            Ok(FrameRotation {
                factors: Some(rotation_matrix(truth.aoa_rad, truth.tof_s, scene)),
                phase: Complex64::from_polar(1.0, eps),
            })
        }
        RotationMode::Estimated | RotationMode::EstimatedNoAlign => match &report.user_peak {
            None => Ok(FrameRotation::identity()),
            Some(p) => {
                let phase = if mode == RotationMode::Estimated {
                    let idx = report.estimate.peaks.iter().position(|x| x == p).unwrap_or(0);
                    alignment_phase(frame, &report.estimate.peaks, idx, scene)
                } else {
                    Complex64::new(1.0, 0.0)
                };
                Ok(FrameRotation {
                    factors: Some(rotation_matrix(p.aoa_rad, p.tof_s, scene)),
                    phase,
                })
            }
        },
    }
}

fn true_user(ground_truth: Option<&[Vec<PathSpec>]>, q: usize) -> Option<&PathSpec> {
    ground_truth
        .and_then(|g| g.get(q))
        .and_then(|ps| ps.iter().find(|p| p.kind == PathKind::UserReflection))
}

/// Rotated frames for every receiver (outer) and frame (inner).
pub fn rotate_streams(
    streams: &[CsiStream],
    receivers: &[ReceiverReport],
    scene: &Scene,
    mode: RotationMode,
    ground_truth: Option<&[Vec<PathSpec>]>,
) -> Result<Vec<Vec<CMatrix>>> {
    streams
        .iter()
        .zip(receivers)
        .enumerate()
        .map(|(q, (stream, rep))| {
            (0..stream.len())
                .map(|u| frame_rotation(stream, u, rep, scene, mode, true_user(ground_truth, q))?.apply(&stream.frames[u]))
                .collect()
        })
        .collect()
}

/// Coherence ratio `|sum_q c_q| / sum_q |c_q|` of the true user components of
/// frame `u` after the rotation the pipeline applies to each receiver.
pub fn user_coherence(
    scene: &Scene,
    streams: &[CsiStream],
    receivers: &[ReceiverReport],
    ground_truth: &[Vec<PathSpec>],
    mode: RotationMode,
    u: usize,
) -> Result<f64> {
    let comps = streams
        .iter()
        .zip(receivers)
        .enumerate()
        .map(|(q, (stream, rep))| {
            let user = true_user(Some(ground_truth), q)
                .ok_or_else(|| Error::InvalidArgument(format!("receiver {q} has no user path")))?;
            let eps = stream.phase_errors_rad.get(u).copied().unwrap_or(0.0);
            let comp = noiseless_frame(scene, std::slice::from_ref(user), eps);
            frame_rotation(stream, u, rep, scene, mode, Some(user))?.apply(&comp)
        })
        .collect::<Result<Vec<_>>>()?;
    coherence_ratio(&comps)
}

/// Full perception chain on one set of receiver streams.
pub fn run_smsp(
    scene: &Scene,
    streams: &[CsiStream],
    cfg: &SmspConfig,
    ground_truth: Option<&[Vec<PathSpec>]>,
) -> Result<SmspOutput> {
    scene.validate()?;
    if streams.len() != scene.rx.len() {
        return Err(mismatch(scene.rx.len(), streams.len()));
    }
    let frames = streams[0].len();
    if streams.iter().any(|s| s.len() != frames) {
        return Err(Error::InvalidArgument("receivers must report the same number of frames".into()));
    }
    let estimates = streams
        .par_iter()
        .map(|s| estimate_paths(s, scene, &cfg.music))
        .collect::<Result<Vec<_>>>()?;
    let path_estimates: Vec<PathEstimate> = estimates.iter().map(|e| e.estimate.clone()).collect();
    let location = localize_user(&path_estimates, scene, &cfg.localize)?;

    let s1 = large_scale_scores(&location.pos, scene);
    let mut receivers = Vec::with_capacity(streams.len());
    for (q, (stream, est)) in streams.iter().zip(&estimates).enumerate() {
        let bearing = scene.rx[q].aoa_of(&location.pos);
        receivers.push(ReceiverReport {
            receiver_id: scene.rx[q].id,
            estimated_paths: est.decomposition.order,
            estimate: est.estimate.clone(),
            user_peak: location.selected[q].map(|k| est.estimate.peaks[k].clone()),
            beam_bearing_rad: bearing,
            beam_powers: beam_power_series(stream, bearing, scene)?,
        });
    }
    let series: Vec<Vec<f64>> = receivers.iter().map(|r| r.beam_powers.clone()).collect();
    let s2 = if frames >= 2 {
        small_scale_scores(&series)?
    } else {
        vec![0.0; series.len()]
    };
    let scores = LinkScores { s1, s2 };

    let rotated = rotate_streams(streams, &receivers, scene, cfg.rotation, ground_truth)?;
    let features = (0..frames)
        .map(|u| {
            let per_rx: Vec<CMatrix> = rotated.iter().map(|r| r[u].clone()).collect();
            build_feature_matrix(&per_rx, &scores)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SmspOutput {
        receivers,
        location,
        scores,
        features,
    })
}
