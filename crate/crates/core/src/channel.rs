//! Scene geometry, propagation paths and synthetic CSI.
//!
//! Each receiver carries a uniform linear array of `n_antennas` elements.
//! For path `l` the CSI on antenna `m` (0-based) and subcarrier `n` is
//!
//! ```text
//! H[m][n] = sum_l alpha_l * exp(-j 2 pi f_n (tau_l + m k sin(theta_l) / c)) * exp(-j eps) + noise
//! ```
//!
//! with `f_n` spread uniformly over `[f_center - bw/2, f_center + bw/2]`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cmatrix::CMatrix;
use crate::error::{Error, Result};
use crate::rng;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Minimum separation (meters) between the user and any transceiver.
const MIN_SEPARATION_M: f64 = 1e-6;

/// A point in the plane, meters. Serialized as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Bearing of `other` seen from `self`, radians in (-pi, pi].
    pub fn bearing_to(&self, other: &Point) -> f64 {
        (other.y - self.y).atan2(other.x - self.x)
    }
}

impl From<[f64; 2]> for Point {
    fn from(p: [f64; 2]) -> Self {
        Point::new(p[0], p[1])
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReceiverSpec {
    pub id: usize,
    pub pos: Point,
    /// Broadside direction of the array, radians.
    pub array_orientation_rad: f64,
}

impl ReceiverSpec {
    /// Receiver at `pos` whose broadside faces `target`.
    pub fn facing(id: usize, pos: Point, target: Point) -> Self {
        Self {
            id,
            pos,
            array_orientation_rad: pos.bearing_to(&target),
        }
    }

    /// Angle of arrival of a signal coming from `source`, measured from
    /// broadside and folded into [-pi/2, pi/2] (a linear array cannot tell
    /// front from back).
    pub fn aoa_of(&self, source: &Point) -> f64 {
        fold_aoa(wrap_angle(self.pos.bearing_to(source) - self.array_orientation_rad))
    }
}

/// Wrap an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Map an angle in (-pi, pi] to the equivalent linear-array angle in [-pi/2, pi/2].
pub fn fold_aoa(a: f64) -> f64 {
    if a > PI / 2.0 {
        PI - a
    } else if a < -PI / 2.0 {
        -PI - a
    } else {
        a
    }
}

/// Which frequency drives the inter-antenna phase term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AoaModel {
    /// Per-subcarrier frequency `f_n`, as in the full wideband model.
    #[default]
    Wideband,
    /// Center frequency for every subcarrier.
    Narrowband,
}

/// Amplitude gains applied before the 1/distance decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathGains {
    pub direct: f64,
    pub user: f64,
    pub reflector: f64,
}

impl Default for PathGains {
    fn default() -> Self {
        Self {
            direct: 1.0,
            user: 0.6,
            reflector: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scene {
    pub tx_pos: Point,
    pub rx: Vec<ReceiverSpec>,
    pub user_pos: Point,
    pub f_center_hz: f64,
    pub bandwidth_hz: f64,
    pub n_subcarriers: usize,
    pub n_antennas: usize,
    pub antenna_spacing_m: f64,
    pub packet_rate_hz: f64,
    /// Static scatterers producing one extra path each.
    #[serde(default)]
    pub reflectors: Vec<Point>,
    #[serde(default = "default_true")]
    pub include_direct: bool,
    #[serde(default)]
    pub gains: PathGains,
    #[serde(default)]
    pub aoa_model: AoaModel,
}

fn default_true() -> bool {
    true
}

impl Default for Scene {
    fn default() -> Self {
        Self::default_3rx()
    }
}

impl Scene {
    /// Three receivers around an 8 m x 8 m room at 5.805 GHz / 80 MHz with
    /// 256 subcarriers and three half-wavelength spaced antennas.
    pub fn default_3rx() -> Self {
        let f_center_hz = 5.805e9;
        let center = Point::new(4.0, 4.0);
        Self {
            tx_pos: Point::new(0.0, 0.0),
            rx: vec![
                ReceiverSpec::facing(0, Point::new(8.0, 1.0), center),
                ReceiverSpec::facing(1, Point::new(1.0, 8.0), center),
                ReceiverSpec::facing(2, Point::new(8.0, 8.0), center),
            ],
            user_pos: Point::new(7.5, 3.5),
            f_center_hz,
            bandwidth_hz: 80e6,
            n_subcarriers: 256,
            n_antennas: 3,
            antenna_spacing_m: SPEED_OF_LIGHT / f_center_hz / 2.0,
            packet_rate_hz: 100.0,
            reflectors: Vec::new(),
            include_direct: true,
            gains: PathGains::default(),
            aoa_model: AoaModel::Wideband,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidScene(msg.to_string()));
        if self.n_subcarriers < 2 {
            return bad("n_subcarriers must be at least 2");
        }
        if self.n_antennas < 2 {
            return bad("n_antennas must be at least 2");
        }
        if !(self.antenna_spacing_m > 0.0) {
            return bad("antenna_spacing_m must be positive");
        }
        if !(self.bandwidth_hz > 0.0) {
            return bad("bandwidth_hz must be positive");
        }
        if !(self.f_center_hz > self.bandwidth_hz / 2.0) {
            return bad("f_center_hz must exceed half the bandwidth");
        }
        if !(self.packet_rate_hz > 0.0) {
            return bad("packet_rate_hz must be positive");
        }
        if self.rx.is_empty() {
            return bad("at least one receiver is required");
        }
        let mut ids: Vec<usize> = self.rx.iter().map(|r| r.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("receiver ids must be unique");
        }
        Ok(())
    }

    pub fn subcarrier_spacing_hz(&self) -> f64 {
        self.bandwidth_hz / (self.n_subcarriers - 1) as f64
    }

    /// Frequency of subcarrier `n` (0-based).
    pub fn subcarrier_freq(&self, n: usize) -> f64 {
        self.f_center_hz - self.bandwidth_hz / 2.0 + n as f64 * self.subcarrier_spacing_hz()
    }

    pub fn subcarrier_freqs(&self) -> Vec<f64> {
        (0..self.n_subcarriers).map(|n| self.subcarrier_freq(n)).collect()
    }

    /// Frequency used in the inter-antenna phase term for subcarrier `n`.
    pub fn antenna_term_freq(&self, n: usize) -> f64 {
        match self.aoa_model {
            AoaModel::Wideband => self.subcarrier_freq(n),
            AoaModel::Narrowband => self.f_center_hz,
        }
    }

    pub fn receiver_index(&self, id: usize) -> Option<usize> {
        self.rx.iter().position(|r| r.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    Direct,
    UserReflection,
    StaticReflection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSpec {
    pub aoa_rad: f64,
    pub tof_s: f64,
    pub attenuation: Complex64,
    pub kind: PathKind,
}

impl PathSpec {
    fn via(scene: &Scene, rx: &ReceiverSpec, point: Option<&Point>, gain: f64, kind: PathKind) -> Self {
        let (arrival_from, length) = match point {
            None => (scene.tx_pos, scene.tx_pos.distance(&rx.pos)),
            Some(p) => (*p, scene.tx_pos.distance(p) + p.distance(&rx.pos)),
        };
        Self {
            aoa_rad: rx.aoa_of(&arrival_from),
            tof_s: length / SPEED_OF_LIGHT,
            attenuation: Complex64::new(gain / length, 0.0),
            kind,
        }
    }
}

/// Ground-truth paths per receiver (in scene order).
///
/// Attenuations are real and positive (`gain / path length`); use
/// [`randomize_phases`] to add initial phases.
pub fn ground_truth_paths(scene: &Scene) -> Result<Vec<Vec<PathSpec>>> {
    scene.validate()?;
    let mut out = Vec::with_capacity(scene.rx.len());
    for rx in &scene.rx {
        if scene.user_pos.distance(&rx.pos) < MIN_SEPARATION_M {
            return Err(Error::DegenerateGeometry(format!(
                "user collocated with receiver {}",
                rx.id
            )));
        }
        if scene.include_direct && scene.tx_pos.distance(&rx.pos) < MIN_SEPARATION_M {
            return Err(Error::DegenerateGeometry(format!(
                "transmitter collocated with receiver {}",
                rx.id
            )));
        }
        let mut paths = Vec::new();
        if scene.include_direct {
            paths.push(PathSpec::via(scene, rx, None, scene.gains.direct, PathKind::Direct));
        }
        paths.push(PathSpec::via(
            scene,
            rx,
            Some(&scene.user_pos),
            scene.gains.user,
            PathKind::UserReflection,
        ));
        for refl in &scene.reflectors {
            if refl.distance(&rx.pos) < MIN_SEPARATION_M {
                return Err(Error::DegenerateGeometry(format!(
                    "reflector collocated with receiver {}",
                    rx.id
                )));
            }
            paths.push(PathSpec::via(
                scene,
                rx,
                Some(refl),
                scene.gains.reflector,
                PathKind::StaticReflection,
            ));
        }
        out.push(paths);
    }
    Ok(out)
}

/// Give every path a seeded initial phase. The user reflection shares one
/// phase across receivers (one reflection coefficient per user); direct and
/// static paths get independent phases.
pub fn randomize_phases(paths: &mut [Vec<PathSpec>], seed: u64) {
    let mut rng = rng::stream(seed, "initial-phase", 0);
    let user_phase: f64 = rng.random_range(0.0..2.0 * PI);
    for rx_paths in paths.iter_mut() {
        for p in rx_paths.iter_mut() {
            let phase = match p.kind {
                PathKind::UserReflection => user_phase,
                _ => rng.random_range(0.0..2.0 * PI),
            };
            p.attenuation = Complex64::from_polar(p.attenuation.norm(), phase);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseErrorModel {
    #[default]
    None,
    /// One uniform [0, 2pi) offset per frame shared by all antennas and
    /// subcarriers; independent across receivers.
    UniformPerFrame,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLevel {
    /// Absolute complex noise variance.
    Variance(f64),
    /// SNR in dB relative to the summed path power `sum |alpha|^2` of each receiver.
    SnrDb(f64),
}

impl NoiseLevel {
    pub fn variance_for(&self, paths: &[PathSpec]) -> f64 {
        match *self {
            NoiseLevel::Variance(v) => v,
            NoiseLevel::SnrDb(db) if db.is_infinite() && db > 0.0 => 0.0,
            NoiseLevel::SnrDb(db) => reference_power(paths) / 10f64.powf(db / 10.0),
        }
    }
}

/// Sum of path powers, the expected per-element power of the noiseless CSI.
pub fn reference_power(paths: &[PathSpec]) -> f64 {
    paths.iter().map(|p| p.attenuation.norm_sqr()).sum()
}

/// CSI frames collected by one receiver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsiStream {
    pub receiver_id: usize,
    pub frames: Vec<CMatrix>,
    pub timestamps_s: Vec<f64>,
    pub phase_errors_rad: Vec<f64>,
    pub noise_var: f64,
}

impl CsiStream {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// (antennas, subcarriers)
    pub fn dims(&self) -> (usize, usize) {
        self.frames.first().map_or((0, 0), CMatrix::shape)
    }
}

/// Steering response of one path at antenna `m`, subcarrier `n`.
pub fn path_response(scene: &Scene, aoa: f64, tof: f64, m: usize, n: usize) -> Complex64 {
    let f_n = scene.subcarrier_freq(n);
    let f_a = scene.antenna_term_freq(n);
    let phase = -2.0 * PI
        * (f_n * tof + f_a * m as f64 * scene.antenna_spacing_m * aoa.sin() / SPEED_OF_LIGHT);
    Complex64::from_polar(1.0, phase)
}

/// Noiseless M x N frame for the given paths and phase error.
pub fn noiseless_frame(scene: &Scene, paths: &[PathSpec], phase_error: f64) -> CMatrix {
    let common = Complex64::from_polar(1.0, -phase_error);
    CMatrix::from_fn(scene.n_antennas, scene.n_subcarriers, |m, n| {
        paths
            .iter()
            .map(|p| p.attenuation * path_response(scene, p.aoa_rad, p.tof_s, m, n))
            .sum::<Complex64>()
            * common
    })
}

/// Circularly-symmetric complex Gaussian sample with variance `var`.
pub fn complex_gaussian(rng: &mut rng::Rng, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

/// Synthesize `frames` noisy CSI frames for every receiver.
///
/// Receiver `q` draws phase errors and noise from streams derived from
/// `(seed, q)`, so streams are independent across receivers and identical
/// for a fixed seed.
pub fn synthesize_csi(
    scene: &Scene,
    paths: &[Vec<PathSpec>],
    noise: NoiseLevel,
    phase_model: PhaseErrorModel,
    frames: usize,
    seed: u64,
) -> Result<Vec<CsiStream>> {
    scene.validate()?;
    if frames == 0 {
        return Err(Error::InvalidArgument("frame count must be at least 1".into()));
    }
    if paths.len() != scene.rx.len() {
        return Err(crate::error::mismatch(scene.rx.len(), paths.len()));
    }
    scene
        .rx
        .iter()
        .zip(paths)
        .enumerate()
        .map(|(q, (rx, rx_paths))| {
            let noise_var = noise.variance_for(rx_paths);
            if !(noise_var >= 0.0) {
                return Err(Error::InvalidArgument("noise variance must be non-negative".into()));
            }
            let mut phase_rng = rng::stream(seed, "phase-error", q as u64);
            let mut noise_rng = rng::stream(seed, "noise", q as u64);
            let mut stream = CsiStream {
                receiver_id: rx.id,
                frames: Vec::with_capacity(frames),
                timestamps_s: Vec::with_capacity(frames),
                phase_errors_rad: Vec::with_capacity(frames),
                noise_var,
            };
            for u in 0..frames {
                let eps = match phase_model {
                    PhaseErrorModel::None => 0.0,
                    PhaseErrorModel::UniformPerFrame => phase_rng.random_range(0.0..2.0 * PI),
                };
                let mut frame = noiseless_frame(scene, rx_paths, eps);
                if noise_var > 0.0 {
                    for z in frame.as_mut_slice() {
                        *z += complex_gaussian(&mut noise_rng, noise_var);
                    }
                }
                stream.frames.push(frame);
                stream.timestamps_s.push(u as f64 / scene.packet_rate_hz);
                stream.phase_errors_rad.push(eps);
            }
            Ok(stream)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_scene(tx: Point, rx: Point, user: Point) -> Scene {
        let mut s = Scene::default_3rx();
        s.tx_pos = tx;
        s.user_pos = user;
        s.rx = vec![ReceiverSpec::facing(0, rx, Point::new(rx.x, rx.y + 1.0))];
        s
    }

    #[test]
    fn user_tof_matches_hand_distances() {
        let s = line_scene(Point::new(0.0, 0.0), Point::new(6.0, 0.0), Point::new(3.0, 4.0));
        let paths = ground_truth_paths(&s).unwrap();
        let user = paths[0].iter().find(|p| p.kind == PathKind::UserReflection).unwrap();
        assert!((user.tof_s - 10.0 / SPEED_OF_LIGHT).abs() < 1e-18);
    }

    #[test]
    fn direct_tof_is_straight_line() {
        let s = line_scene(Point::new(0.0, 0.0), Point::new(10.0, 0.0), Point::new(5.0, 3.0));
        let paths = ground_truth_paths(&s).unwrap();
        let direct = paths[0].iter().find(|p| p.kind == PathKind::Direct).unwrap();
        assert!((direct.tof_s - 10.0 / SPEED_OF_LIGHT).abs() < 1e-18);
    }

    #[test]
    fn broadside_user_has_zero_aoa() {
        // Receiver faces +y; user straight ahead.
        let s = line_scene(Point::new(-3.0, 0.0), Point::new(0.0, 0.0), Point::new(0.0, 4.0));
        let paths = ground_truth_paths(&s).unwrap();
        let user = paths[0].iter().find(|p| p.kind == PathKind::UserReflection).unwrap();
        assert!(user.aoa_rad.abs() < 1e-12);
        // Transmitter lies along the array axis.
        let direct = paths[0].iter().find(|p| p.kind == PathKind::Direct).unwrap();
        assert!((direct.aoa_rad.abs() - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn exactly_one_user_path_per_receiver() {
        let mut s = Scene::default_3rx();
        s.reflectors = vec![Point::new(2.0, 6.0)];
        for rx_paths in ground_truth_paths(&s).unwrap() {
            let users = rx_paths.iter().filter(|p| p.kind == PathKind::UserReflection).count();
            assert_eq!(users, 1);
            assert_eq!(rx_paths.len(), 3);
            assert!(rx_paths.iter().all(|p| p.aoa_rad.abs() <= PI / 2.0 && p.tof_s >= 0.0));
        }
    }

    #[test]
    fn collocated_user_is_degenerate() {
        let mut s = Scene::default_3rx();
        s.user_pos = s.rx[1].pos;
        assert!(matches!(ground_truth_paths(&s), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn validation_rejects_bad_scenes() {
        let mut s = Scene::default_3rx();
        s.n_antennas = 1;
        assert!(s.validate().is_err());
        let mut s = Scene::default_3rx();
        s.rx[1].id = s.rx[0].id;
        assert!(s.validate().is_err());
        let mut s = Scene::default_3rx();
        s.rx.clear();
        assert!(s.validate().is_err());
    }

    #[test]
    fn subcarriers_span_the_band() {
        let s = Scene::default_3rx();
        let f = s.subcarrier_freqs();
        assert!((f[0] - (s.f_center_hz - 40e6)).abs() < 1e-3);
        assert!((f[255] - (s.f_center_hz + 40e6)).abs() < 1e-3);
    }

    fn single_path(aoa: f64, tof: f64) -> Vec<PathSpec> {
        vec![PathSpec {
            aoa_rad: aoa,
            tof_s: tof,
            attenuation: Complex64::new(1.0, 0.0),
            kind: PathKind::UserReflection,
        }]
    }

    #[test]
    fn zero_path_parameters_give_unit_csi() {
        let s = Scene::default_3rx();
        let frame = noiseless_frame(&s, &single_path(0.0, 0.0), 0.0);
        assert!(frame.as_slice().iter().all(|z| (z - Complex64::new(1.0, 0.0)).norm() < 1e-12));
    }

    #[test]
    fn antenna_ratio_encodes_aoa() {
        let s = Scene::default_3rx();
        let theta = 30f64.to_radians();
        let frame = noiseless_frame(&s, &single_path(theta, 0.0), 0.0);
        for n in [0, 100, 255] {
            let ratio = frame[(1, n)] / frame[(0, n)];
            let expected = Complex64::from_polar(
                1.0,
                -2.0 * PI * s.subcarrier_freq(n) * s.antenna_spacing_m * 0.5 / SPEED_OF_LIGHT,
            );
            assert!((ratio - expected).norm() < 1e-9);
        }
    }

    #[test]
    fn mirrored_paths_add_on_reference_antenna() {
        let s = Scene::default_3rx();
        let a = 0.7;
        let mut paths = single_path(0.4, 20e-9);
        paths.push(PathSpec { aoa_rad: -0.4, ..paths[0].clone() });
        for p in &mut paths {
            p.attenuation = Complex64::new(a, 0.0);
        }
        let frame = noiseless_frame(&s, &paths, 0.0);
        for n in 0..s.n_subcarriers {
            assert!((frame[(0, n)].norm() - 2.0 * a).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let s = Scene::default_3rx();
        let paths = ground_truth_paths(&s).unwrap();
        let run = |seed| {
            synthesize_csi(&s, &paths, NoiseLevel::SnrDb(10.0), PhaseErrorModel::UniformPerFrame, 3, seed)
                .unwrap()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn zero_frames_rejected() {
        let s = Scene::default_3rx();
        let paths = ground_truth_paths(&s).unwrap();
        assert!(synthesize_csi(&s, &paths, NoiseLevel::Variance(0.0), PhaseErrorModel::None, 0, 1).is_err());
        assert!(synthesize_csi(&s, &paths, NoiseLevel::Variance(-1.0), PhaseErrorModel::None, 1, 1).is_err());
    }
}
