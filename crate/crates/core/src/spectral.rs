//! Joint AoA/ToF estimation: spatial smoothing, Hermitian eigendecomposition,
//! MDL model-order selection and 2-D MUSIC.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{CsiStream, Scene, SPEED_OF_LIGHT};
use crate::cmatrix::CMatrix;
use crate::error::{mismatch, Error, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Sliding-window stack of one CSI frame.
///
/// Row `i * w_s + j` of `x` holds antenna `i`, subcarrier `j` of a window;
/// column `shift_a * (N - w_s + 1) + shift_s` is the window whose top-left
/// corner sits at antenna `shift_a`, subcarrier `shift_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedSnapshot {
    pub x: CMatrix,
    /// (antennas, subcarriers) per window.
    pub window: (usize, usize),
    /// (M, N) of the source frame.
    pub frame_dims: (usize, usize),
}

impl SmoothedSnapshot {
    /// (M', N'): stacked window size and number of windows.
    pub fn sub_array_dims(&self) -> (usize, usize) {
        self.x.shape()
    }
}

pub fn spatial_smooth(frame: &CMatrix, window: (usize, usize)) -> Result<SmoothedSnapshot> {
    let (m, n) = frame.shape();
    let (wa, ws) = window;
    if wa < 2 || ws < 2 {
        return Err(Error::InvalidArgument(format!(
            "smoothing window must be at least 2x2, got {wa}x{ws}"
        )));
    }
    if wa > m || ws > n {
        return Err(Error::InvalidArgument(format!(
            "smoothing window {wa}x{ws} larger than frame {m}x{n}"
        )));
    }
    let shifts_s = n - ws + 1;
    let cols = (m - wa + 1) * shifts_s;
    let x = CMatrix::from_fn(wa * ws, cols, |row, col| {
        let (i, j) = (row / ws, row % ws);
        let (sa, ss) = (col / shifts_s, col % shifts_s);
        frame[(sa + i, ss + j)]
    });
    Ok(SmoothedSnapshot {
        x,
        window,
        frame_dims: (m, n),
    })
}

/// Keep subcarriers `offset, offset + stride, ...`.
pub fn decimate_subcarriers(frame: &CMatrix, stride: usize, offset: usize) -> Result<CMatrix> {
    if stride == 0 || offset >= stride || offset >= frame.cols() {
        return Err(Error::InvalidArgument(format!(
            "invalid decimation stride {stride} / offset {offset}"
        )));
    }
    let kept = (frame.cols() - offset).div_ceil(stride);
    Ok(CMatrix::from_fn(frame.rows(), kept, |r, c| frame[(r, offset + c * stride)]))
}

/// R = (1 / (U N')) sum_u X_u X_u^H
pub fn correlation_matrix(snapshots: &[SmoothedSnapshot]) -> Result<CMatrix> {
    let first = snapshots
        .first()
        .ok_or_else(|| Error::InvalidArgument("at least one snapshot is required".into()))?;
    let (dim, cols) = first.sub_array_dims();
    let mut r = CMatrix::zeros(dim, dim);
    for snap in snapshots {
        if snap.sub_array_dims() != (dim, cols) {
            return Err(mismatch(
                format!("{:?}", (dim, cols)),
                format!("{:?}", snap.sub_array_dims()),
            ));
        }
        let x = &snap.x;
        for i in 0..dim {
            let xi = x.row(i);
            for j in i..dim {
                let acc: Complex64 = xi.iter().zip(x.row(j)).map(|(a, b)| a * b.conj()).sum();
                r[(i, j)] += acc;
            }
        }
    }
    let norm = 1.0 / (snapshots.len() * cols) as f64;
    for i in 0..dim {
        r[(i, i)] = Complex64::new(r[(i, i)].re * norm, 0.0);
        for j in i + 1..dim {
            let v = r[(i, j)] * norm;
            r[(i, j)] = v;
            r[(j, i)] = v.conj();
        }
    }
    Ok(r)
}

/// Eigenvalues (descending) and matching orthonormal eigenvectors (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: CMatrix,
}

/// Relative asymmetry tolerated before a matrix is rejected as non-Hermitian.
const HERMITIAN_TOL: f64 = 1e-9;
const MAX_SWEEPS: usize = 100;

/// Eigendecomposition of a Hermitian matrix by cyclic complex Jacobi rotations.
pub fn eig_hermitian(r: &CMatrix) -> Result<Eigen> {
    let (n, cols) = r.shape();
    if n != cols {
        return Err(mismatch(format!("square matrix, {n} rows"), format!("{cols} columns")));
    }
    let scale = r.frobenius_norm();
    let defect = r.hermitian_defect();
    if !defect.is_finite() || defect > HERMITIAN_TOL * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::NotHermitian(defect));
    }
    // Work on the exactly Hermitian part.
    let mut a = CMatrix::from_fn(n, n, |i, j| (r[(i, j)] + r[(j, i)].conj()) * 0.5);
    let mut v = CMatrix::identity(n);

    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)].norm_sqr())
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                let rabs = apq.norm();
                if rabs <= 1e-300 || rabs <= 1e-18 * scale {
                    continue;
                }
                let e_neg = (apq / rabs).conj(); // exp(-i phi)
                let e_pos = apq / rabs; // exp(i phi)
                let app = a[(p, p)].re;
                let aqq = a[(q, q)].re;
                let zeta = (aqq - app) / (2.0 * rabs);
                let t = if zeta.is_infinite() {
                    0.0
                } else {
                    zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                // A <- A U
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = akp * c - akq * e_neg * s;
                    a[(k, q)] = akp * s + akq * e_neg * c;
                }
                // A <- U^H A
                for k in 0..n {
                    let bpk = a[(p, k)];
                    let bqk = a[(q, k)];
                    a[(p, k)] = bpk * c - bqk * e_pos * s;
                    a[(q, k)] = bpk * s + bqk * e_pos * c;
                }
                a[(p, q)] = ZERO;
                a[(q, p)] = ZERO;
                a[(p, p)] = Complex64::new(a[(p, p)].re, 0.0);
                a[(q, q)] = Complex64::new(a[(q, q)].re, 0.0);
                // V <- V U
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = vkp * c - vkq * e_neg * s;
                    v[(k, q)] = vkp * s + vkq * e_neg * c;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].re.total_cmp(&a[(i, i)].re).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[(i, i)].re).collect();
    let vectors = CMatrix::from_fn(n, n, |row, col| v[(row, order[col])]);
    Ok(Eigen { values, vectors })
}

/// Floor applied (relative to the largest eigenvalue) before taking logs.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// MDL score for every candidate order `L = 0..M'-1`.
pub fn mdl_scores(eigenvalues: &[f64], observations: usize) -> Result<Vec<f64>> {
    let dim = eigenvalues.len();
    if dim < 2 {
        return Err(Error::InvalidArgument("MDL needs at least 2 eigenvalues".into()));
    }
    if observations < 2 {
        return Err(Error::InvalidArgument("MDL needs at least 2 observations".into()));
    }
    let max = eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let u = observations as f64;
    let floor = if max > 0.0 { EIGEN_FLOOR * max } else { 1.0 };
    let lam: Vec<f64> = eigenvalues.iter().map(|&l| l.max(floor)).collect();
    Ok((0..dim)
        .map(|l| {
            let tail = &lam[l..];
            let k = tail.len() as f64;
            let mean_log = tail.iter().map(|x| x.ln()).sum::<f64>() / k;
            let log_mean = (tail.iter().sum::<f64>() / k).ln();
            let fit = -(k * u) * (mean_log - log_mean);
            let penalty = 0.5 * (l * (2 * dim - l)) as f64 * u.ln();
            fit + penalty
        })
        .collect())
}

/// Estimated number of sources (argmin of the MDL criterion, smallest on ties).
pub fn mdl_order(eigenvalues: &[f64], observations: usize) -> Result<usize> {
    let max = eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scores = mdl_scores(eigenvalues, observations)?;
    if !(max > 0.0) {
        return Ok(0);
    }
    let mut best = 0;
    for (l, s) in scores.iter().enumerate() {
        if *s < scores[best] {
            best = l;
        }
    }
    Ok(best)
}

/// Eigendecomposition split into signal and noise subspaces.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceDecomposition {
    pub eigen: Eigen,
    pub order: usize,
}

impl SubspaceDecomposition {
    pub fn dim(&self) -> usize {
        self.eigen.values.len()
    }

    pub fn signal_basis(&self) -> CMatrix {
        self.eigen.vectors.columns(0, self.order)
    }

    pub fn noise_basis(&self) -> CMatrix {
        self.eigen.vectors.columns(self.order, self.dim())
    }
}

/// Angle/delay search grid. Angles in degrees, delays in nanoseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub theta_min_deg: f64,
    pub theta_max_deg: f64,
    pub theta_step_deg: f64,
    pub tau_min_ns: f64,
    pub tau_max_ns: f64,
    pub tau_step_ns: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            theta_min_deg: -90.0,
            theta_max_deg: 90.0,
            theta_step_deg: 1.0,
            tau_min_ns: 0.0,
            tau_max_ns: 200.0,
            tau_step_ns: 1.0,
        }
    }
}

fn axis(min: f64, max: f64, step: f64) -> Vec<f64> {
    let count = ((max - min) / step + 1e-9).floor() as usize + 1;
    (0..count).map(|i| min + i as f64 * step).collect()
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = |lo: f64, hi: f64, step: f64| step > 0.0 && hi >= lo && lo.is_finite() && hi.is_finite();
        if !ok(self.theta_min_deg, self.theta_max_deg, self.theta_step_deg)
            || !ok(self.tau_min_ns, self.tau_max_ns, self.tau_step_ns)
        {
            return Err(Error::InvalidArgument("grid ranges must be finite with positive steps".into()));
        }
        if self.theta_min_deg < -90.0 || self.theta_max_deg > 90.0 {
            return Err(Error::InvalidArgument("angle grid must lie within [-90, 90] degrees".into()));
        }
        Ok(())
    }

    pub fn thetas_deg(&self) -> Vec<f64> {
        axis(self.theta_min_deg, self.theta_max_deg, self.theta_step_deg)
    }

    pub fn taus_ns(&self) -> Vec<f64> {
        axis(self.tau_min_ns, self.tau_max_ns, self.tau_step_ns)
    }
}

/// Geometry of the smoothed steering vector `a(theta, tau) = u(theta) (x) v(tau)`
/// with `u_i = exp(-j 2 pi f_c k sin(theta) i / c)` and `v_j = exp(-j 2 pi df tau j)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteeringLayout {
    pub window_antennas: usize,
    pub window_subcarriers: usize,
    pub f_center_hz: f64,
    pub antenna_spacing_m: f64,
    /// Frequency step between consecutive rows of a window.
    pub subcarrier_spacing_hz: f64,
}

impl SteeringLayout {
    pub fn for_scene(scene: &Scene, window: (usize, usize), stride: usize) -> Self {
        Self {
            window_antennas: window.0,
            window_subcarriers: window.1,
            f_center_hz: scene.f_center_hz,
            antenna_spacing_m: scene.antenna_spacing_m,
            subcarrier_spacing_hz: scene.subcarrier_spacing_hz() * stride as f64,
        }
    }

    pub fn dim(&self) -> usize {
        self.window_antennas * self.window_subcarriers
    }

    pub fn antenna_vector(&self, theta: f64) -> Vec<Complex64> {
        let step = -2.0 * PI * self.f_center_hz * self.antenna_spacing_m * theta.sin() / SPEED_OF_LIGHT;
        (0..self.window_antennas).map(|i| Complex64::from_polar(1.0, step * i as f64)).collect()
    }

    pub fn delay_vector(&self, tau: f64) -> Vec<Complex64> {
        let step = -2.0 * PI * self.subcarrier_spacing_hz * tau;
        (0..self.window_subcarriers).map(|j| Complex64::from_polar(1.0, step * j as f64)).collect()
    }

    pub fn steering(&self, theta: f64, tau: f64) -> Vec<Complex64> {
        let u = self.antenna_vector(theta);
        let v = self.delay_vector(tau);
        u.iter().flat_map(|ui| v.iter().map(move |vj| ui * vj)).collect()
    }
}

/// MUSIC pseudo-spectrum on a grid, row-major with angle rows and delay columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub thetas_deg: Vec<f64>,
    pub taus_ns: Vec<f64>,
    pub values: Vec<f64>,
}

impl Spectrum {
    pub fn get(&self, i_theta: usize, i_tau: usize) -> f64 {
        self.values[i_theta * self.taus_ns.len() + i_tau]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.thetas_deg.len(), self.taus_ns.len())
    }

    /// Grid cell of the global maximum (lowest index on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (best / self.taus_ns.len(), best % self.taus_ns.len())
    }
}

fn check_noise_basis(noise_basis: &CMatrix, layout: &SteeringLayout) -> Result<()> {
    if noise_basis.rows() != layout.dim() {
        return Err(mismatch(layout.dim(), noise_basis.rows()));
    }
    if noise_basis.cols() == 0 {
        return Err(Error::NoNoiseSubspace(noise_basis.rows()));
    }
    Ok(())
}

fn music_value(denominator: f64) -> f64 {
    1.0 / denominator.max(f64::MIN_POSITIVE)
}

/// Single-point MUSIC value `1 / (a^H E_N E_N^H a)`.
pub fn music_point(noise_basis: &CMatrix, layout: &SteeringLayout, theta: f64, tau: f64) -> Result<f64> {
    check_noise_basis(noise_basis, layout)?;
    let a = layout.steering(theta, tau);
    let denom: f64 = (0..noise_basis.cols())
        .map(|c| {
            (0..a.len())
                .map(|r| noise_basis[(r, c)].conj() * a[r])
                .sum::<Complex64>()
                .norm_sqr()
        })
        .sum();
    Ok(music_value(denom))
}

/// Full-grid MUSIC spectrum by direct evaluation of every steering vector.
/// Reference implementation for [`music_spectrum`].
pub fn music_spectrum_direct(noise_basis: &CMatrix, layout: &SteeringLayout, grid: &GridSpec) -> Result<Spectrum> {
    grid.validate()?;
    check_noise_basis(noise_basis, layout)?;
    let thetas = grid.thetas_deg();
    let taus = grid.taus_ns();
    let mut values = Vec::with_capacity(thetas.len() * taus.len());
    for th in &thetas {
        for ta in &taus {
            values.push(music_point(noise_basis, layout, th.to_radians(), ta * 1e-9)?);
        }
    }
    Ok(Spectrum {
        thetas_deg: thetas,
        taus_ns: taus,
        values,
    })
}

/// Full-grid MUSIC spectrum.
///
/// Uses the Kronecker structure of the steering vector: with
/// `P = E_N E_N^H` split into `w_a x w_a` blocks `P_ii'` of size `w_s x w_s`,
/// `a^H P a = sum_ii' conj(u_i) u_i' (v^H P_ii' v)`, so the inner quadratic
/// forms are computed once per delay and reused for every angle.
pub fn music_spectrum(noise_basis: &CMatrix, layout: &SteeringLayout, grid: &GridSpec) -> Result<Spectrum> {
    grid.validate()?;
    check_noise_basis(noise_basis, layout)?;
    let (wa, ws) = (layout.window_antennas, layout.window_subcarriers);
    let dim = layout.dim();
    let projector = noise_basis.matmul(&noise_basis.adjoint())?;
    let thetas = grid.thetas_deg();
    let taus = grid.taus_ns();

    // blocks[t][i * wa + i'] = v(tau_t)^H P_ii' v(tau_t)
    let blocks: Vec<Vec<Complex64>> = taus
        .par_iter()
        .map(|ta| {
            let v = layout.delay_vector(ta * 1e-9);
            let mut out = vec![ZERO; wa * wa];
            for i in 0..wa {
                for i2 in 0..wa {
                    let mut acc = ZERO;
                    for j in 0..ws {
                        let row = projector.row(i * ws + j);
                        let mut inner = ZERO;
                        for j2 in 0..ws {
                            inner += row[i2 * ws + j2] * v[j2];
                        }
                        acc += v[j].conj() * inner;
                    }
                    out[i * wa + i2] = acc;
                }
            }
            out
        })
        .collect();
    debug_assert_eq!(projector.rows(), dim);

    let rows: Vec<Vec<f64>> = thetas
        .par_iter()
        .map(|th| {
            let u = layout.antenna_vector(th.to_radians());
            blocks
                .iter()
                .map(|b| {
                    let mut acc = ZERO;
                    for i in 0..wa {
                        for i2 in 0..wa {
                            acc += u[i].conj() * u[i2] * b[i * wa + i2];
                        }
                    }
                    music_value(acc.re)
                })
                .collect()
        })
        .collect();

    Ok(Spectrum {
        thetas_deg: thetas,
        taus_ns: taus,
        values: rows.into_iter().flatten().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub aoa_rad: f64,
    pub tof_s: f64,
    pub value: f64,
    /// Grid cell (angle index, delay index).
    pub cell: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEstimate {
    pub peaks: Vec<Peak>,
    /// Number of peaks requested.
    pub requested: usize,
    /// Fewer local maxima than requested were found.
    pub shortfall: bool,
    pub grid: GridSpec,
}

/// Angle and delay error of an estimate against a reference path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathMatch {
    pub peak_index: usize,
    pub aoa_error_deg: f64,
    pub tof_error_ns: f64,
}

impl PathMatch {
    pub fn within(&self, aoa_tol_deg: f64, tof_tol_ns: f64) -> bool {
        self.aoa_error_deg <= aoa_tol_deg && self.tof_error_ns <= tof_tol_ns
    }
}

/// Peak closest to `(aoa_rad, tof_s)` under the distance
/// `|d_aoa| / 2 deg + |d_tof| / 10 ns`; `None` without peaks.
pub fn match_path(peaks: &[Peak], aoa_rad: f64, tof_s: f64) -> Option<PathMatch> {
    peaks
        .iter()
        .enumerate()
        .map(|(i, p)| PathMatch {
            peak_index: i,
            aoa_error_deg: (p.aoa_rad - aoa_rad).to_degrees().abs(),
            tof_error_ns: (p.tof_s - tof_s).abs() * 1e9,
        })
        .min_by(|a, b| {
            let da = a.aoa_error_deg / 2.0 + a.tof_error_ns / 10.0;
            let db = b.aoa_error_deg / 2.0 + b.tof_error_ns / 10.0;
            da.total_cmp(&db)
        })
}

/// All strict local maxima over the 8-neighbourhood, sorted by value
/// descending then grid order. On plateaus only the first cell in grid order
/// qualifies.
pub fn local_maxima(spectrum: &Spectrum) -> Vec<(usize, usize)> {
    let (nt, nd) = spectrum.shape();
    let mut out = Vec::new();
    for i in 0..nt {
        for j in 0..nd {
            let v = spectrum.get(i, j);
            let mut is_peak = true;
            'nb: for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let (ni, nj) = (i as i64 + di, j as i64 + dj);
                    if ni < 0 || nj < 0 || ni >= nt as i64 || nj >= nd as i64 {
                        continue;
                    }
                    let w = spectrum.get(ni as usize, nj as usize);
                    let earlier = (ni, nj) < (i as i64, j as i64);
                    if w > v || (earlier && w == v) {
                        is_peak = false;
                        break 'nb;
                    }
                }
            }
            if is_peak {
                out.push((i, j));
            }
        }
    }
    out.sort_by(|a, b| {
        spectrum
            .get(b.0, b.1)
            .total_cmp(&spectrum.get(a.0, a.1))
            .then(a.cmp(b))
    });
    out
}

pub fn peak_estimates(spectrum: &Spectrum, count: usize, grid: &GridSpec) -> Result<PathEstimate> {
    if count == 0 {
        return Err(Error::InvalidArgument("peak count must be at least 1".into()));
    }
    let maxima = local_maxima(spectrum);
    let peaks: Vec<Peak> = maxima
        .iter()
        .take(count)
        .map(|&(i, j)| Peak {
            aoa_rad: spectrum.thetas_deg[i].to_radians(),
            tof_s: spectrum.taus_ns[j] * 1e-9,
            value: spectrum.get(i, j),
            cell: (i, j),
        })
        .collect();
    Ok(PathEstimate {
        shortfall: peaks.len() < count,
        peaks,
        requested: count,
        grid: grid.clone(),
    })
}

/// Move a grid peak to the local maximum of the continuous spectrum,
/// searching at most one grid cell away in each direction.
pub fn refine_peak(peak: &mut Peak, noise_basis: &CMatrix, layout: &SteeringLayout, grid: &GridSpec) -> Result<()> {
    let (dt, dd) = (grid.theta_step_deg, grid.tau_step_ns);
    let (t0, d0) = (peak.aoa_rad.to_degrees(), peak.tof_s * 1e9);
    let (tlo, thi) = ((t0 - dt).max(grid.theta_min_deg), (t0 + dt).min(grid.theta_max_deg));
    let (dlo, dhi) = ((d0 - dd).max(grid.tau_min_ns), (d0 + dd).min(grid.tau_max_ns));
    let eval = |t: f64, d: f64| music_point(noise_basis, layout, t.to_radians(), d * 1e-9);
    let (mut t, mut d) = (t0, d0);
    let mut best = eval(t, d)?;
    let mut step = 0.5;
    while step > 1e-4 {
        let mut moved = false;
        for (a, b) in [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)] {
            let nt = (t + a * step * dt).clamp(tlo, thi);
            let nd = (d + b * step * dd).clamp(dlo, dhi);
            let v = eval(nt, nd)?;
            if v > best {
                best = v;
                t = nt;
                d = nd;
                moved = true;
                break;
            }
        }
        if !moved {
            step /= 2.0;
        }
    }
    peak.aoa_rad = t.to_radians();
    peak.tof_s = d * 1e-9;
    peak.value = best;
    Ok(())
}

/// Observation count used in the MDL penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MdlObservations {
    /// Frames times windows per frame.
    #[default]
    Snapshots,
    /// Frames only.
    Frames,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MusicConfig {
    /// Antennas per smoothing window; `None` picks half the array (at least 2).
    pub window_antennas: Option<usize>,
    pub window_subcarriers: usize,
    /// Subcarrier decimation applied before smoothing.
    pub subcarrier_stride: usize,
    /// Use every decimation offset as an extra snapshot instead of only offset 0.
    pub all_offsets: bool,
    pub grid: GridSpec,
    pub mdl_observations: MdlObservations,
    /// Upper bound on the estimated path count.
    pub max_paths: usize,
    /// Skip MDL and use this order instead.
    pub fixed_order: Option<usize>,
    /// Polish grid peaks by a local search on the continuous spectrum.
    pub refine_peaks: bool,
}

impl Default for MusicConfig {
    fn default() -> Self {
        Self {
            window_antennas: None,
            window_subcarriers: 16,
            subcarrier_stride: 8,
            all_offsets: true,
            grid: GridSpec::default(),
            mdl_observations: MdlObservations::Snapshots,
            max_paths: 6,
            fixed_order: None,
            refine_peaks: true,
        }
    }
}

impl MusicConfig {
    /// Effective (antennas, subcarriers) window for a frame of `dims`.
    pub fn window_for(&self, dims: (usize, usize)) -> (usize, usize) {
        let (m, n) = dims;
        let kept = n / self.subcarrier_stride.max(1);
        let wa = self.window_antennas.unwrap_or(m.div_ceil(2)).clamp(2, m.max(2));
        let ws = self.window_subcarriers.clamp(2, kept.max(2));
        (wa, ws)
    }
}

/// Everything produced by one MUSIC run.
#[derive(Debug, Clone)]
pub struct MusicResult {
    pub decomposition: SubspaceDecomposition,
    pub spectrum: Spectrum,
    pub estimate: PathEstimate,
    pub layout: SteeringLayout,
    pub observations: usize,
}

/// Smoothed snapshots of every frame (and every decimation offset).
pub fn stream_snapshots(stream: &CsiStream, config: &MusicConfig) -> Result<Vec<SmoothedSnapshot>> {
    if stream.is_empty() {
        return Err(Error::InvalidArgument("CSI stream has no frames".into()));
    }
    let dims = stream.dims();
    let window = config.window_for(dims);
    let stride = config.subcarrier_stride.max(1);
    let offsets = if config.all_offsets { stride } else { 1 };
    let kept = dims.1 / stride;
    let mut snaps = Vec::with_capacity(stream.len() * offsets);
    for frame in &stream.frames {
        if frame.shape() != dims {
            return Err(mismatch(format!("{dims:?}"), format!("{:?}", frame.shape())));
        }
        for off in 0..offsets {
            // Trailing offsets may be one subcarrier shorter; keep windows aligned.
            let dec = decimate_subcarriers(frame, stride, off)?;
            let dec = dec.columns(0, kept);
            snaps.push(spatial_smooth(&dec, window)?);
        }
    }
    Ok(snaps)
}

/// Run smoothing, eigendecomposition, MDL and MUSIC on one receiver's stream.
pub fn estimate_paths(stream: &CsiStream, scene: &Scene, config: &MusicConfig) -> Result<MusicResult> {
    let snaps = stream_snapshots(stream, config)?;
    let window = snaps[0].window;
    let r = correlation_matrix(&snaps)?;
    let eigen = eig_hermitian(&r)?;
    let dim = eigen.values.len();
    let observations = match config.mdl_observations {
        MdlObservations::Snapshots => snaps.len() * snaps[0].sub_array_dims().1,
        MdlObservations::Frames => stream.len(),
    };
    let order = match config.fixed_order {
        Some(l) => l,
        None => mdl_order(&eigen.values, observations.max(2))?.min(config.max_paths),
    };
    if order >= dim {
        return Err(Error::NoNoiseSubspace(dim));
    }
    let decomposition = SubspaceDecomposition { eigen, order };
    let layout = SteeringLayout::for_scene(scene, window, config.subcarrier_stride.max(1));
    let spectrum = music_spectrum(&decomposition.noise_basis(), &layout, &config.grid)?;
    let estimate = if order == 0 {
        PathEstimate {
            peaks: Vec::new(),
            requested: 0,
            shortfall: false,
            grid: config.grid.clone(),
        }
    } else {
        let mut est = peak_estimates(&spectrum, order, &config.grid)?;
        if config.refine_peaks {
            let en = decomposition.noise_basis();
            for p in &mut est.peaks {
                refine_peak(p, &en, &layout, &config.grid)?;
            }
        }
        est
    };
    Ok(MusicResult {
        decomposition,
        spectrum,
        estimate,
        layout,
        observations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn check_eigen(r: &CMatrix, e: &Eigen) {
        let n = r.rows();
        let scale = r.frobenius_norm().max(1e-300);
        for k in 0..n {
            let v = e.vectors.column(k);
            let rv = r.mul_vec(&v).unwrap();
            let res: f64 = rv.iter().zip(&v).map(|(a, b)| (a - b * e.values[k]).norm_sqr()).sum::<f64>().sqrt();
            assert!(res <= 1e-8 * scale, "residual {res}");
            for l in 0..n {
                let d = crate::cmatrix::dot_conj(&v, &e.vectors.column(l));
                let expect = if k == l { 1.0 } else { 0.0 };
                assert!((d - c(expect, 0.0)).norm() < 1e-8);
            }
        }
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn smoothing_shapes() {
        let f = CMatrix::from_fn(4, 4, |r, k| c(r as f64, k as f64));
        let s = spatial_smooth(&f, (2, 2)).unwrap();
        assert_eq!(s.sub_array_dims(), (4, 9));
        let s = spatial_smooth(&f, (4, 4)).unwrap();
        assert_eq!(s.sub_array_dims(), (16, 1));
        assert!(spatial_smooth(&f, (5, 2)).is_err());
        assert!(spatial_smooth(&f, (1, 2)).is_err());
    }

    #[test]
    fn smoothing_layout() {
        let f = CMatrix::from_fn(3, 5, |r, k| c(r as f64, k as f64));
        let s = spatial_smooth(&f, (2, 3)).unwrap();
        // Column for shift (1, 2), row for (i=1, j=2).
        let col = 3 + 2;
        assert_eq!(s.x[(3 + 2, col)], f[(2, 4)]);
        let ones = spatial_smooth(&CMatrix::from_fn(3, 5, |_, _| c(1.0, 0.0)), (2, 2)).unwrap();
        assert!(ones.x.as_slice().iter().all(|z| *z == c(1.0, 0.0)));
    }

    #[test]
    fn correlation_of_single_column() {
        let x = vec![c(1.0, 2.0), c(-0.5, 0.25)];
        let snap = SmoothedSnapshot {
            x: CMatrix::from_columns(&[x.clone()]).unwrap(),
            window: (2, 1),
            frame_dims: (2, 1),
        };
        let r = correlation_matrix(&[snap]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((r[(i, j)] - x[i] * x[j].conj()).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn correlation_of_orthonormal_columns() {
        let snap = SmoothedSnapshot {
            x: CMatrix::identity(3),
            window: (3, 1),
            frame_dims: (3, 1),
        };
        let r = correlation_matrix(&[snap]).unwrap();
        assert!(r.sub(&CMatrix::identity(3).scale(1.0 / 3.0)).unwrap().frobenius_norm() < 1e-15);
    }

    #[test]
    fn eig_of_simple_matrices() {
        let e = eig_hermitian(&CMatrix::identity(3)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);
        let d = CMatrix::from_fn(3, 3, |i, j| if i == j { c((i + 1) as f64, 0.0) } else { c(0.0, 0.0) });
        let e = eig_hermitian(&d).unwrap();
        assert_eq!(e.values, vec![3.0, 2.0, 1.0]);
        assert!((e.vectors[(2, 0)].norm() - 1.0).abs() < 1e-15);
        let x = [c(1.0, 1.0), c(0.0, -1.0), c(1.0, 0.0), c(0.0, 0.0)];
        let rank1 = CMatrix::from_fn(4, 4, |i, j| x[i] * x[j].conj());
        let e = eig_hermitian(&rank1).unwrap();
        assert!((e.values[0] - 4.0).abs() < 1e-12);
        assert!(e.values[1..].iter().all(|v| v.abs() < 1e-12));
        check_eigen(&rank1, &e);
    }

    #[test]
    fn eig_of_dense_hermitian() {
        let mut rng = crate::rng::stream(3, "eig", 0);
        let b = CMatrix::from_fn(8, 8, |_, _| crate::channel::complex_gaussian(&mut rng, 1.0));
        let r = b.matmul(&b.adjoint()).unwrap();
        let e = eig_hermitian(&r).unwrap();
        check_eigen(&r, &e);
        let trace: f64 = (0..8).map(|i| r[(i, i)].re).sum();
        assert!((trace - e.values.iter().sum::<f64>()).abs() < 1e-10 * trace);
    }

    #[test]
    fn eig_rejects_non_hermitian() {
        let mut m = CMatrix::identity(2);
        m[(0, 1)] = c(1.0, 0.0);
        assert!(matches!(eig_hermitian(&m), Err(Error::NotHermitian(_))));
    }

    #[test]
    fn mdl_picks_signal_count() {
        let lam = [50.0, 20.0, 1.0, 1.0, 1.0, 1.0];
        assert_eq!(mdl_order(&lam, 100).unwrap(), 2);
        assert_eq!(mdl_order(&[1.0; 6], 100).unwrap(), 0);
        let scaled: Vec<f64> = lam.iter().map(|l| l * 7.5).collect();
        assert_eq!(mdl_order(&scaled, 100).unwrap(), 2);
        assert!(mdl_order(&[1.0], 100).is_err());
        assert!(mdl_order(&lam, 1).is_err());
        // Noiseless rank-1 data with zero eigenvalues stays finite.
        assert_eq!(mdl_order(&[4.0, 0.0, 0.0, 0.0], 50).unwrap(), 1);
        assert_eq!(mdl_order(&[0.0, 0.0], 50).unwrap(), 0);
    }

    #[test]
    fn grid_axes() {
        let g = GridSpec::default();
        assert_eq!(g.thetas_deg().len(), 181);
        assert_eq!(g.taus_ns().len(), 201);
        assert_eq!(*g.taus_ns().last().unwrap(), 200.0);
    }

    fn toy_layout() -> SteeringLayout {
        SteeringLayout {
            window_antennas: 2,
            window_subcarriers: 4,
            f_center_hz: 5.8e9,
            antenna_spacing_m: 0.5 * SPEED_OF_LIGHT / 5.8e9,
            subcarrier_spacing_hz: 2.5e6,
        }
    }

    fn small_grid() -> GridSpec {
        GridSpec {
            theta_min_deg: -60.0,
            theta_max_deg: 60.0,
            theta_step_deg: 5.0,
            tau_min_ns: 0.0,
            tau_max_ns: 100.0,
            tau_step_ns: 5.0,
        }
    }

    fn random_noise_basis(layout: &SteeringLayout, k: usize, seed: u64) -> CMatrix {
        let mut rng = crate::rng::stream(seed, "basis", 0);
        let b = CMatrix::from_fn(layout.dim(), layout.dim(), |_, _| crate::channel::complex_gaussian(&mut rng, 1.0));
        let r = b.matmul(&b.adjoint()).unwrap();
        eig_hermitian(&r).unwrap().vectors.columns(0, k)
    }

    #[test]
    fn fast_spectrum_matches_direct() {
        let layout = toy_layout();
        let en = random_noise_basis(&layout, 5, 11);
        let fast = music_spectrum(&en, &layout, &small_grid()).unwrap();
        let direct = music_spectrum_direct(&en, &layout, &small_grid()).unwrap();
        for (a, b) in fast.values.iter().zip(&direct.values) {
            assert!((a - b).abs() <= 1e-9 * b.abs(), "{a} vs {b}");
            assert!(*a > 0.0 && a.is_finite());
        }
    }

    #[test]
    fn orthogonal_steering_gives_huge_value() {
        let layout = toy_layout();
        let a = layout.steering(0.3, 40e-9);
        // Project a out of a random basis, then orthonormalize (Gram-Schmidt).
        let raw = random_noise_basis(&layout, 4, 2);
        let an = crate::cmatrix::norm(&a);
        let mut cols: Vec<Vec<Complex64>> = Vec::new();
        for k in 0..raw.cols() {
            let mut v = raw.column(k);
            for basis in std::iter::once(a.iter().map(|z| z / an).collect::<Vec<_>>()).chain(cols.clone()) {
                let d = crate::cmatrix::dot_conj(&basis, &v);
                for (x, b) in v.iter_mut().zip(&basis) {
                    *x -= d * b;
                }
            }
            let nv = crate::cmatrix::norm(&v);
            cols.push(v.iter().map(|z| z / nv).collect());
        }
        let en = CMatrix::from_columns(&cols).unwrap();
        let p = music_point(&en, &layout, 0.3, 40e-9).unwrap();
        assert!(1.0 / p <= 1e-10);
    }

    #[test]
    fn empty_noise_subspace_rejected() {
        let layout = toy_layout();
        let en = CMatrix::zeros(layout.dim(), 0);
        assert!(matches!(
            music_spectrum(&en, &layout, &small_grid()),
            Err(Error::NoNoiseSubspace(_))
        ));
    }

    fn spectrum_from(values: Vec<f64>, nt: usize, nd: usize) -> Spectrum {
        Spectrum {
            thetas_deg: (0..nt).map(|i| i as f64).collect(),
            taus_ns: (0..nd).map(|j| j as f64).collect(),
            values,
        }
    }

    #[test]
    fn single_spike_is_found() {
        let mut v = vec![1.0; 25];
        v[2 * 5 + 3] = 9.0;
        let s = spectrum_from(v, 5, 5);
        let est = peak_estimates(&s, 1, &GridSpec::default()).unwrap();
        assert_eq!(est.peaks[0].cell, (2, 3));
        assert!(!est.shortfall);
    }

    #[test]
    fn equal_spikes_break_ties_in_grid_order() {
        let mut v = vec![1.0; 36];
        v[4 * 6 + 1] = 5.0;
        v[6 + 4] = 5.0;
        let s = spectrum_from(v, 6, 6);
        let est = peak_estimates(&s, 3, &GridSpec::default()).unwrap();
        assert_eq!(est.peaks[0].cell, (1, 4));
        assert_eq!(est.peaks[1].cell, (4, 1));
        assert!(est.shortfall || est.peaks.len() == 3);
    }

    #[test]
    fn flat_spectrum_reports_shortfall() {
        let s = spectrum_from(vec![1.0; 9], 3, 3);
        let est = peak_estimates(&s, 2, &GridSpec::default()).unwrap();
        assert_eq!(est.peaks.len(), 1);
        assert!(est.shortfall);
    }
}
