//! Low-light white balance.
//!
//! Error metrics (angular, reproduction, anisotropic reproduction), an RBF
//! calibration warp between sensor and canonical log-UV spaces, and a
//! trainable log-chroma histogram estimator. The estimator correlates pixel
//! and edge histograms with four brightness-conditioned filter sets, turns the
//! score map into a distribution with a softmax, and reports its centroid.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raw_model::{Cfa, CfaColor, LinearImage};
use crate::scalar::Real;

const DEG: f64 = 180.0 / std::f64::consts::PI;

fn check_positive<T: Real>(v: &[T; 3], what: &str) -> Result<()> {
    if v.iter().any(|&x| !(x > T::zero()) || !x.is_finite()) {
        return Err(Error::InvalidParameter(format!("{what} must have positive finite entries")));
    }
    Ok(())
}

/// Angle between two vectors in degrees, via atan2 so it stays accurate
/// near zero. `None` for a zero vector.
fn angle_deg<T: Real>(a: [T; 3], b: [T; 3]) -> Option<T> {
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let cross = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    let sin = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    let zero = |v: [T; 3]| v.iter().all(|&x| x == T::zero());
    (!zero(a) && !zero(b)).then(|| sin.atan2(dot) * T::lit(DEG))
}

/// Angle between two RGB vectors, degrees.
pub fn angular_error<T: Real>(lp: [T; 3], lt: [T; 3]) -> Result<T> {
    angle_deg(lp, lt).ok_or_else(|| Error::InvalidParameter("angular error of a zero vector".into()))
}

/// Error in the appearance of a white patch, degrees: acos(|r|_1 / (sqrt(3) |r|_2)), r = lt / lp.
pub fn reproduction_error<T: Real>(lp: [T; 3], lt: [T; 3]) -> Result<T> {
    anisotropic_reproduction_error(lp, lt, [T::one(); 3])
}

/// Reproduction error weighted by the true image's mean colour `mu`, degrees.
pub fn anisotropic_reproduction_error<T: Real>(lp: [T; 3], lt: [T; 3], mu: [T; 3]) -> Result<T> {
    check_positive(&lp, "predicted illuminant")?;
    check_positive(&lt, "true illuminant")?;
    if mu.iter().any(|&m| !(m >= T::zero())) || mu.iter().all(|&m| m == T::zero()) {
        return Err(Error::InvalidParameter("mean colour must be non-negative and not all zero".into()));
    }
    // equals acos(sqrt(r)' H sqrt(r) / (sqrt(tr H) sqrt(r' H r))) with H = diag(mu)^2:
    // the angle between mu and mu * r
    let weighted: [T; 3] = std::array::from_fn(|i| mu[i] * lt[i] / lp[i]);
    Ok(angle_deg(mu, weighted).expect("mu and lp, lt checked"))
}

/// Training loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    Angular,
    Reproduction,
    Are,
    /// Gaussian negative log-likelihood of the true chroma under the score
    /// distribution's mean and covariance. Experimental.
    VonMises,
}

impl Loss {
    pub const ALL: [Loss; 4] = [Loss::Angular, Loss::Reproduction, Loss::Are, Loss::VonMises];

    pub fn name(self) -> &'static str {
        match self {
            Loss::Angular => "angular",
            Loss::Reproduction => "reproduction",
            Loss::Are => "are",
            Loss::VonMises => "von-mises",
        }
    }
}

impl std::str::FromStr for Loss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Loss::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown loss {s:?}")))
    }
}

/// d acos(x)/dx in degrees, with the singularity at |x| = 1 floored.
fn dacos_deg(x: f64) -> f64 {
    -DEG / (1.0 - x * x).max(1e-18).sqrt()
}

/// Metric value in degrees and its gradient with respect to `lp`.
pub fn metric_with_grad(loss: Loss, lp: [f64; 3], lt: [f64; 3], mu: [f64; 3]) -> (f64, [f64; 3]) {
    match loss {
        Loss::Angular => {
            let dot: f64 = (0..3).map(|i| lp[i] * lt[i]).sum();
            let np = lp.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nt = lt.iter().map(|v| v * v).sum::<f64>().sqrt();
            let x = (dot / (np * nt)).clamp(-1.0, 1.0);
            let d = dacos_deg(x);
            let g = std::array::from_fn(|i| d * (lt[i] / (np * nt) - x * lp[i] / (np * np)));
            (x.acos() * DEG, g)
        }
        Loss::Reproduction | Loss::Are => {
            let h: [f64; 3] = if loss == Loss::Are { mu.map(|m| m * m) } else { [1.0; 3] };
            let r: [f64; 3] = std::array::from_fn(|i| lt[i] / lp[i]);
            let trace: f64 = h.iter().sum();
            let num: f64 = (0..3).map(|i| h[i] * r[i]).sum();
            let q: f64 = (0..3).map(|i| h[i] * r[i] * r[i]).sum();
            let den = trace.sqrt() * q.sqrt();
            let x = (num / den).clamp(-1.0, 1.0);
            let d = dacos_deg(x);
            let g = std::array::from_fn(|i| {
                let dx_dr = h[i] / den - num * h[i] * r[i] / (trace.sqrt() * q.powf(1.5));
                d * dx_dr * (-r[i] / lp[i])
            });
            (x.acos() * DEG, g)
        }
        Loss::VonMises => panic!("von-mises is not a pointwise metric"),
    }
}

/// Log-UV chroma (ln g/r, ln g/b); `None` unless every channel is positive.
#[inline]
pub fn log_uv(rgb: [f64; 3]) -> Option<[f64; 2]> {
    (rgb[0] > 0.0 && rgb[1] > 0.0 && rgb[2] > 0.0).then(|| [(rgb[1] / rgb[0]).ln(), (rgb[1] / rgb[2]).ln()])
}

/// RGB with unit green whose log-UV chroma is `uv`.
#[inline]
pub fn rgb_from_uv(uv: [f64; 2]) -> [f64; 3] {
    [(-uv[0]).exp(), 1.0, (-uv[1]).exp()]
}

/// Sensor-to-canonical log-UV warp by row-normalized Gaussian RBF interpolation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMap {
    pub x: Vec<[f64; 2]>,
    pub y: Vec<[f64; 2]>,
    pub theta: Vec<[f64; 2]>,
    pub sigma: f64,
    pub lambda: f64,
    /// Near-duplicate calibration points were found.
    #[serde(default)]
    pub ill_conditioned: bool,
}

/// Calibration pairs as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationFile {
    pub x: Vec<[f64; 2]>,
    pub y: Vec<[f64; 2]>,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_sigma() -> f64 {
    0.3
}
fn default_lambda() -> f64 {
    0.1
}

/// Solves `a x = b` (row-major `n x n`, `b` with `m` columns) by Gaussian
/// elimination with partial pivoting.
pub fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>, n: usize, m: usize) -> Result<Vec<f64>> {
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .expect("non-empty range");
        if a[piv * n + col].abs() < 1e-300 {
            return Err(Error::Numeric("singular linear system".into()));
        }
        if piv != col {
            for k in 0..n {
                a.swap(piv * n + k, col * n + k);
            }
            for k in 0..m {
                b.swap(piv * m + k, col * m + k);
            }
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            for k in 0..m {
                b[row * m + k] -= f * b[col * m + k];
            }
        }
    }
    let mut x = vec![0.0; n * m];
    for row in (0..n).rev() {
        for k in 0..m {
            let mut s = b[row * m + k];
            for j in row + 1..n {
                s -= a[row * n + j] * x[j * m + k];
            }
            x[row * m + k] = s / a[row * n + row];
        }
    }
    Ok(x)
}

/// Row-normalized Gaussian affinities of `p` to every centre.
pub fn rbf_row(p: [f64; 2], centres: &[[f64; 2]], sigma: f64) -> Vec<f64> {
    let s2 = 2.0 * sigma * sigma;
    let mut row: Vec<f64> = centres
        .iter()
        .map(|c| (-((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)) / s2).exp())
        .collect();
    let sum: f64 = row.iter().sum();
    if sum > 0.0 {
        row.iter_mut().for_each(|v| *v /= sum);
    } else {
        // far from every centre: fall back to the nearest
        let nearest = centres
            .iter()
            .enumerate()
            .min_by(|a, b| {
                let da = (p[0] - a.1[0]).powi(2) + (p[1] - a.1[1]).powi(2);
                let db = (p[0] - b.1[0]).powi(2) + (p[1] - b.1[1]).powi(2);
                da.total_cmp(&db)
            })
            .map(|(i, _)| i)
            .expect("centres non-empty");
        row[nearest] = 1.0;
    }
    row
}

/// Fits theta = [phi(X, X); lambda I] \ [Y - X; 0] through the normal equations.
pub fn rbf_fit(x: &[[f64; 2]], y: &[[f64; 2]], sigma: f64, lambda: f64) -> Result<CalibrationMap> {
    let n = x.len();
    if n < 3 || y.len() != n {
        return Err(Error::InvalidParameter(format!(
            "calibration needs at least 3 matched pairs, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if !(sigma > 0.0) || !(lambda >= 0.0) {
        return Err(Error::InvalidParameter("rbf sigma must be positive and lambda non-negative".into()));
    }
    let mut ill_conditioned = false;
    for i in 0..n {
        for j in i + 1..n {
            if (x[i][0] - x[j][0]).abs() < 1e-9 && (x[i][1] - x[j][1]).abs() < 1e-9 {
                ill_conditioned = true;
            }
        }
    }
    if ill_conditioned {
        log::warn!("calibration contains duplicate sensor points; the fit leans on regularization");
    }
    let phi: Vec<Vec<f64>> = x.iter().map(|&p| rbf_row(p, x, sigma)).collect();
    let mut ata = vec![0.0; n * n];
    let mut atb = vec![0.0; n * 2];
    for (r, row) in phi.iter().enumerate() {
        let t = [y[r][0] - x[r][0], y[r][1] - x[r][1]];
        for i in 0..n {
            for j in 0..n {
                ata[i * n + j] += row[i] * row[j];
            }
            atb[i * 2] += row[i] * t[0];
            atb[i * 2 + 1] += row[i] * t[1];
        }
    }
    for i in 0..n {
        ata[i * n + i] += lambda * lambda;
    }
    let sol = solve_dense(ata, atb, n, 2)?;
    Ok(CalibrationMap {
        x: x.to_vec(),
        y: y.to_vec(),
        theta: (0..n).map(|i| [sol[2 * i], sol[2 * i + 1]]).collect(),
        sigma,
        lambda,
        ill_conditioned,
    })
}

/// Result of inverting the warp.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverseSolution {
    pub x: [f64; 2],
    pub iterations: usize,
    pub residual: f64,
}

impl CalibrationMap {
    pub fn identity() -> Self {
        let pts = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        CalibrationMap {
            theta: vec![[0.0; 2]; 3],
            x: pts.clone(),
            y: pts,
            sigma: 0.3,
            lambda: 0.1,
            ill_conditioned: false,
        }
    }

    pub fn from_file(file: &CalibrationFile) -> Result<Self> {
        rbf_fit(&file.x, &file.y, file.sigma, file.lambda)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: CalibrationFile = serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_file(&file)
    }

    /// y = theta^T phi(x)^T + x.
    pub fn forward(&self, p: [f64; 2]) -> [f64; 2] {
        let row = rbf_row(p, &self.x, self.sigma);
        let mut out = p;
        for (w, t) in row.iter().zip(&self.theta) {
            out[0] += w * t[0];
            out[1] += w * t[1];
        }
        out
    }

    /// Gauss-Newton on |forward(x) - y|² seeded at y, central-difference
    /// Jacobian, stopping once the residual norm is below 1e-10.
    pub fn inverse(&self, y: [f64; 2]) -> Result<InverseSolution> {
        const TOL: f64 = 1e-10;
        const MAX_ITERS: usize = 10;
        const H: f64 = 1e-6;
        let mut x = y;
        let residual = |x: [f64; 2]| {
            let f = self.forward(x);
            [f[0] - y[0], f[1] - y[1]]
        };
        let mut r = residual(x);
        let mut iterations = 0;
        while r[0].hypot(r[1]) > TOL {
            if iterations == MAX_ITERS {
                return Err(Error::Numeric(format!(
                    "calibration inverse did not converge after {MAX_ITERS} iterations (residual {:.3e})",
                    r[0].hypot(r[1])
                )));
            }
            let col = |k: usize| {
                let (mut a, mut b) = (x, x);
                a[k] += H;
                b[k] -= H;
                let (fa, fb) = (self.forward(a), self.forward(b));
                [(fa[0] - fb[0]) / (2.0 * H), (fa[1] - fb[1]) / (2.0 * H)]
            };
            let (j0, j1) = (col(0), col(1));
            let det = j0[0] * j1[1] - j1[0] * j0[1];
            if det.abs() < 1e-14 {
                return Err(Error::Numeric("calibration warp Jacobian is singular".into()));
            }
            x[0] -= (j1[1] * r[0] - j1[0] * r[1]) / det;
            x[1] -= (-j0[1] * r[0] + j0[0] * r[1]) / det;
            iterations += 1;
            r = residual(x);
        }
        Ok(InverseSolution {
            x,
            iterations,
            residual: r[0].hypot(r[1]),
        })
    }
}

/// Histogram and model geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AwbConfig {
    pub bins: usize,
    pub uv_min: f64,
    pub uv_max: f64,
    /// Filter half-width in bins.
    pub filter_radius: usize,
    /// Softmax temperature as a fraction of the score map's standard deviation.
    pub temperature: f64,
    pub thumb_width: usize,
    pub thumb_height: usize,
    /// Edge pixels whose largest local deviation is below this fraction of
    /// the median max(r, g, b) are left out of the edge histogram.
    pub edge_threshold: f64,
}

impl Default for AwbConfig {
    fn default() -> Self {
        AwbConfig {
            bins: 64,
            uv_min: -2.1,
            uv_max: 2.1,
            filter_radius: 6,
            temperature: 0.25,
            thumb_width: 64,
            thumb_height: 48,
            edge_threshold: 0.05,
        }
    }
}

impl AwbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 || !(self.uv_max > self.uv_min) || !(self.temperature > 0.0) {
            return Err(Error::InvalidParameter("invalid histogram geometry".into()));
        }
        if 2 * self.filter_radius + 1 > 2 * self.bins {
            return Err(Error::InvalidParameter("filter wider than the histogram".into()));
        }
        Ok(())
    }

    pub fn bin_width(&self) -> f64 {
        (self.uv_max - self.uv_min) / self.bins as f64
    }

    pub fn bin_of(&self, t: f64) -> usize {
        (((t - self.uv_min) / self.bin_width()).floor().max(0.0) as usize).min(self.bins - 1)
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        self.uv_min + (i as f64 + 0.5) * self.bin_width()
    }

    fn taps(&self) -> usize {
        (2 * self.filter_radius + 1).pow(2)
    }
}

/// Histogram channels: pixels, edges, face pixels, face edges.
pub const CHANNELS: usize = 4;
/// Brightness-conditioned filter sets.
pub const SETS: usize = 4;

/// Sparse, unit-mass histogram: (u_bin * bins + v_bin, mass).
pub type SparseHistogram = Vec<(usize, f64)>;

/// Features of one thumbnail.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub histograms: [SparseHistogram; CHANNELS],
    pub log_brightness: f64,
}

/// 3x3 median filter per channel, edge-replicated.
pub fn median3x3<T: Real>(img: &LinearImage<T>) -> LinearImage<T> {
    let mut out = img.clone();
    let (w, h) = (img.width as isize, img.height as isize);
    let mut win = [T::zero(); 9];
    for y in 0..h {
        for x in 0..w {
            for c in 0..img.channels {
                let mut k = 0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (sx, sy) = ((x + dx).clamp(0, w - 1) as usize, (y + dy).clamp(0, h - 1) as usize);
                        win[k] = img.at_c(sx, sy, c);
                        k += 1;
                    }
                }
                win.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
                out.set_c(x as usize, y as usize, c, win[4]);
            }
        }
    }
    out
}

/// Linear RGB thumbnail: each output pixel averages the R, G and B sites of
/// its block of the mosaic. Then 3x3 median filtered.
pub fn thumbnail_from_mosaic<T: Real>(mosaic: &LinearImage<T>, cfa: Cfa, width: usize, height: usize) -> Result<LinearImage<T>> {
    if mosaic.width < 2 * width || mosaic.height < 2 * height {
        return Err(Error::ImageTooSmall {
            width: mosaic.width,
            height: mosaic.height,
            levels: 1,
        });
    }
    let mut out = LinearImage::new(width, height, 3);
    for ty in 0..height {
        let (y0, y1) = (ty * mosaic.height / height, (ty + 1) * mosaic.height / height);
        for tx in 0..width {
            let (x0, x1) = (tx * mosaic.width / width, (tx + 1) * mosaic.width / width);
            let mut sum = [0.0f64; 3];
            let mut n = [0usize; 3];
            for y in y0..y1 {
                for x in x0..x1 {
                    let c = cfa.color_at(x, y) as usize;
                    sum[c] += mosaic.at(x, y).as_f64();
                    n[c] += 1;
                }
            }
            for c in 0..3 {
                out.set_c(tx, ty, c, T::lit(sum[c] / n[c].max(1) as f64));
            }
        }
    }
    let _ = CfaColor::Green;
    Ok(median3x3(&out))
}

/// ln(median over pixels of max(r, g, b)) - ln(exposure_time * gain * iso_ratio).
/// A non-positive median is floored at 1e-6.
pub fn log_brightness<T: Real>(thumb: &LinearImage<T>, exposure_time: f64, gain: f64, iso_ratio: f64) -> Result<f64> {
    if thumb.channels != 3 {
        return Err(Error::InvalidParameter("thumbnail must be RGB".into()));
    }
    let e = exposure_time * gain * iso_ratio;
    if !(e > 0.0) {
        return Err(Error::InvalidParameter("normalized exposure must be positive".into()));
    }
    Ok(median_max(thumb).max(1e-6).ln() - e.ln())
}

fn median_max<T: Real>(thumb: &LinearImage<T>) -> f64 {
    let mut maxes: Vec<f64> = thumb
        .data
        .chunks_exact(3)
        .map(|p| p[0].max(p[1]).max(p[2]).as_f64())
        .collect();
    maxes.sort_by(f64::total_cmp);
    let n = maxes.len();
    if n % 2 == 1 {
        maxes[n / 2]
    } else {
        0.5 * (maxes[n / 2 - 1] + maxes[n / 2])
    }
}

/// |I - 3x3 box mean(I)| per channel.
pub fn edge_image<T: Real>(img: &LinearImage<T>) -> LinearImage<T> {
    let mut out = img.clone();
    let (w, h) = (img.width as isize, img.height as isize);
    let ninth = T::lit(1.0 / 9.0);
    for y in 0..h {
        for x in 0..w {
            for c in 0..img.channels {
                let mut s = T::zero();
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (sx, sy) = ((x + dx).clamp(0, w - 1) as usize, (y + dy).clamp(0, h - 1) as usize);
                        s = s + img.at_c(sx, sy, c);
                    }
                }
                let v = img.at_c(x as usize, y as usize, c);
                out.set_c(x as usize, y as usize, c, (v - s * ninth).abs());
            }
        }
    }
    out
}

/// Unit-mass log-UV histogram of the pixels whose weight is positive and
/// whose channels are all positive, after warping through `calib`.
pub fn histogram<T: Real>(
    img: &LinearImage<T>,
    weights: Option<&[f64]>,
    calib: Option<&CalibrationMap>,
    config: &AwbConfig,
) -> SparseHistogram {
    let b = config.bins;
    let mut dense = vec![0.0f64; b * b];
    let mut total = 0.0;
    for (i, p) in img.data.chunks_exact(3).enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        if !(w > 0.0) {
            continue;
        }
        let Some(mut uv) = log_uv([p[0].as_f64(), p[1].as_f64(), p[2].as_f64()]) else {
            continue;
        };
        if let Some(c) = calib {
            uv = c.forward(uv);
        }
        dense[config.bin_of(uv[0]) * b + config.bin_of(uv[1])] += w;
        total += w;
    }
    if total == 0.0 {
        return Vec::new();
    }
    dense
        .into_iter()
        .enumerate()
        .filter(|&(_, m)| m > 0.0)
        .map(|(i, m)| (i, m / total))
        .collect()
}

/// Pixel, edge and (if a face mask is given) face histograms plus brightness.
pub fn features<T: Real>(
    thumb: &LinearImage<T>,
    exposure_time: f64,
    gain: f64,
    iso_ratio: f64,
    face: Option<&[f64]>,
    calib: Option<&CalibrationMap>,
    config: &AwbConfig,
) -> Result<Features> {
    if let Some(f) = face {
        if f.len() != thumb.width * thumb.height {
            return Err(Error::SizeMismatch("face mask does not match the thumbnail".into()));
        }
    }
    let edges = edge_image(thumb);
    let floor = config.edge_threshold * median_max(thumb);
    let strong: Vec<f64> = edges
        .data
        .chunks_exact(3)
        .map(|p| if p[0].max(p[1]).max(p[2]).as_f64() >= floor { 1.0 } else { 0.0 })
        .collect();
    let face_edges = face.map(|f| f.iter().zip(&strong).map(|(a, b)| a * b).collect::<Vec<_>>());
    let histograms = [
        histogram(thumb, None, calib, config),
        histogram(&edges, Some(&strong), calib, config),
        face.map_or_else(Vec::new, |f| histogram(thumb, Some(f), calib, config)),
        face_edges.map_or_else(Vec::new, |f| histogram(&edges, Some(&f), calib, config)),
    ];
    Ok(Features {
        histograms,
        log_brightness: log_brightness(thumb, exposure_time, gain, iso_ratio)?,
    })
}

/// Linear interpolation weights of `l` over four increasing centres, clamped at the ends.
pub fn brightness_blend(l: f64, centres: &[f64; SETS]) -> [f64; SETS] {
    let mut w = [0.0; SETS];
    if !(l > centres[0]) {
        w[0] = 1.0;
        return w;
    }
    if l >= centres[SETS - 1] {
        w[SETS - 1] = 1.0;
        return w;
    }
    for k in 0..SETS - 1 {
        if l < centres[k + 1] {
            let span = centres[k + 1] - centres[k];
            let t = if span > 0.0 { (l - centres[k]) / span } else { 1.0 };
            w[k] = 1.0 - t;
            w[k + 1] = t;
            break;
        }
    }
    w
}

/// Linear-interpolated percentile of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(v.len() - 1);
    v[i] + (v[j] - v[i]) * (pos - i as f64)
}

/// Trained (or untrained) histogram estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChromaHistogramModel {
    pub version: u32,
    pub config: AwbConfig,
    /// Brightness centres: the 12.5/37.5/62.5/87.5th percentiles of training L.
    pub l_centres: [f64; SETS],
    /// Filters, indexed [set][channel][tap], taps row-major over (du, dv).
    pub filters: Vec<f64>,
    /// Bias maps, indexed [set][u_bin][v_bin].
    pub bias: Vec<f64>,
    pub trained: bool,
}

pub const MODEL_VERSION: u32 = 1;

/// Scores, distribution and centroid for one thumbnail.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub scores: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub score_std: f64,
    /// Canonical log-UV centroid.
    pub mean: [f64; 2],
}

impl ChromaHistogramModel {
    /// All-zero filters and biases: a uniform posterior centred on neutral.
    pub fn untrained(config: AwbConfig, l_centres: [f64; SETS]) -> Self {
        let taps = config.taps();
        let bins2 = config.bins * config.bins;
        ChromaHistogramModel {
            version: MODEL_VERSION,
            l_centres,
            filters: vec![0.0; SETS * CHANNELS * taps],
            bias: vec![0.0; SETS * bins2],
            config,
            trained: false,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.filters.len() + self.bias.len()
    }

    fn check(&self) -> Result<()> {
        self.config.validate()?;
        if self.version != MODEL_VERSION {
            return Err(Error::InvalidParameter(format!("unsupported model version {}", self.version)));
        }
        if self.filters.len() != SETS * CHANNELS * self.config.taps() || self.bias.len() != SETS * self.config.bins.pow(2) {
            return Err(Error::InvalidParameter("model parameter sizes do not match its config".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        m.check()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::synth_oracle::write_json(path, self)
    }

    /// S = sum_k beta_k (sum_ch H_ch correlated with F_k,ch + B_k).
    pub fn scores(&self, f: &Features, beta: &[f64; SETS]) -> Vec<f64> {
        let c = &self.config;
        let (b, r) = (c.bins as isize, c.filter_radius as isize);
        let side = 2 * r + 1;
        let taps = c.taps();
        let mut s = vec![0.0; (b * b) as usize];
        for (k, &bk) in beta.iter().enumerate() {
            if bk == 0.0 {
                continue;
            }
            let bias = &self.bias[k * s.len()..(k + 1) * s.len()];
            for (si, &bv) in s.iter_mut().zip(bias) {
                *si += bk * bv;
            }
            for (ch, hist) in f.histograms.iter().enumerate() {
                let filt = &self.filters[(k * CHANNELS + ch) * taps..][..taps];
                for &(j, m) in hist {
                    let (ju, jv) = ((j as isize) / b, (j as isize) % b);
                    let wm = bk * m;
                    for ou in -r..=r {
                        let cu = ju - ou;
                        if cu < 0 || cu >= b {
                            continue;
                        }
                        let frow = &filt[((ou + r) * side) as usize..][..side as usize];
                        let srow = &mut s[(cu * b) as usize..][..b as usize];
                        let (lo, hi) = ((jv - b + 1).max(-r), jv.min(r));
                        for ov in lo..=hi {
                            srow[(jv - ov) as usize] += wm * frow[(ov + r) as usize];
                        }
                    }
                }
            }
        }
        s
    }

    /// Accumulates dLoss/dparams given dLoss/dS.
    fn backward(&self, f: &Features, beta: &[f64; SETS], g_s: &[f64], g_filters: &mut [f64], g_bias: &mut [f64]) {
        let c = &self.config;
        let (b, r) = (c.bins as isize, c.filter_radius as isize);
        let side = 2 * r + 1;
        let taps = c.taps();
        let n = g_s.len();
        for (k, &bk) in beta.iter().enumerate() {
            if bk == 0.0 {
                continue;
            }
            for (gb, &g) in g_bias[k * n..(k + 1) * n].iter_mut().zip(g_s) {
                *gb += bk * g;
            }
            for (ch, hist) in f.histograms.iter().enumerate() {
                let gf = &mut g_filters[(k * CHANNELS + ch) * taps..][..taps];
                for &(j, m) in hist {
                    let (ju, jv) = ((j as isize) / b, (j as isize) % b);
                    let wm = bk * m;
                    for ou in -r..=r {
                        let cu = ju - ou;
                        if cu < 0 || cu >= b {
                            continue;
                        }
                        let grow = &g_s[(cu * b) as usize..][..b as usize];
                        let frow = &mut gf[((ou + r) * side) as usize..][..side as usize];
                        let (lo, hi) = ((jv - b + 1).max(-r), jv.min(r));
                        for ov in lo..=hi {
                            frow[(ov + r) as usize] += wm * grow[(jv - ov) as usize];
                        }
                    }
                }
            }
        }
    }

    fn centre(&self, idx: usize) -> [f64; 2] {
        let b = self.config.bins;
        [self.config.bin_center(idx / b), self.config.bin_center(idx % b)]
    }

    /// Softmax of S / (temperature * std S); a flat score map yields the uniform distribution.
    pub fn posterior(&self, f: &Features) -> Posterior {
        let beta = brightness_blend(f.log_brightness, &self.l_centres);
        let scores = self.scores(f, &beta);
        let n = scores.len() as f64;
        let mean_s = scores.iter().sum::<f64>() / n;
        let sd = (scores.iter().map(|s| (s - mean_s).powi(2)).sum::<f64>() / n).sqrt();
        let probabilities = if sd > 1e-12 {
            let t = self.config.temperature * sd;
            let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| ((s - mx) / t).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        } else {
            vec![1.0 / n; scores.len()]
        };
        let mut mean = [0.0; 2];
        for (i, &p) in probabilities.iter().enumerate() {
            let c = self.centre(i);
            mean[0] += p * c[0];
            mean[1] += p * c[1];
        }
        Posterior {
            scores,
            probabilities,
            score_std: sd,
            mean,
        }
    }

    /// Loss for one example and its gradient with respect to (filters, bias).
    /// `truth_uv` is the canonical chroma of the true illuminant.
    pub fn loss_and_grad(
        &self,
        ex: &PreparedExample,
        loss: Loss,
        g_filters: &mut [f64],
        g_bias: &mut [f64],
    ) -> f64 {
        let post = self.posterior(&ex.features);
        let (value, g_p) = self.loss_of_posterior(&post, ex, loss);
        if post.score_std <= 1e-12 {
            return value;
        }
        let p = &post.probabilities;
        let pg: f64 = p.iter().zip(&g_p).map(|(a, b)| a * b).sum();
        let g_z: Vec<f64> = p.iter().zip(&g_p).map(|(pi, gi)| pi * (gi - pg)).collect();
        let n = p.len() as f64;
        let tau = self.config.temperature;
        let sd = post.score_std;
        let m = post.scores.iter().sum::<f64>() / n;
        let gzs: f64 = g_z.iter().zip(&post.scores).map(|(g, s)| g * s).sum();
        let g_s: Vec<f64> = g_z
            .iter()
            .zip(&post.scores)
            .map(|(g, s)| g / (tau * sd) - gzs / (tau * sd.powi(3) * n) * (s - m))
            .collect();
        self.backward(&ex.features, &ex.beta, &g_s, g_filters, g_bias);
        value
    }

    /// Loss value and dLoss/dP.
    fn loss_of_posterior(&self, post: &Posterior, ex: &PreparedExample, loss: Loss) -> (f64, Vec<f64>) {
        let n = post.probabilities.len();
        let mu = post.mean;
        match loss {
            Loss::VonMises => {
                let eps = self.config.bin_width().powi(2);
                let (mut s00, mut s01, mut s11) = (eps, 0.0, eps);
                for (i, &p) in post.probabilities.iter().enumerate() {
                    let c = self.centre(i);
                    let (a, b) = (c[0] - mu[0], c[1] - mu[1]);
                    s00 += p * a * a;
                    s01 += p * a * b;
                    s11 += p * b * b;
                }
                let det = s00 * s11 - s01 * s01;
                let inv = [s11 / det, -s01 / det, s00 / det];
                let d = [ex.truth_uv[0] - mu[0], ex.truth_uv[1] - mu[1]];
                let id = [inv[0] * d[0] + inv[1] * d[1], inv[1] * d[0] + inv[2] * d[1]];
                let value = 0.5 * (d[0] * id[0] + d[1] * id[1]) + 0.5 * det.ln();
                let g_mu = [-id[0], -id[1]];
                // dL/dSigma = (Sigma^-1 - Sigma^-1 d d^T Sigma^-1) / 2
                let gs = [
                    0.5 * (inv[0] - id[0] * id[0]),
                    0.5 * (inv[1] - id[0] * id[1]),
                    0.5 * (inv[2] - id[1] * id[1]),
                ];
                let g_p = (0..n)
                    .map(|i| {
                        let x = self.centre(i);
                        let dsig00 = x[0] * x[0] - 2.0 * x[0] * mu[0];
                        let dsig01 = x[0] * x[1] - x[0] * mu[1] - mu[0] * x[1];
                        let dsig11 = x[1] * x[1] - 2.0 * x[1] * mu[1];
                        g_mu[0] * x[0] + g_mu[1] * x[1] + gs[0] * dsig00 + 2.0 * gs[1] * dsig01 + gs[2] * dsig11
                    })
                    .collect();
                (value, g_p)
            }
            metric => {
                let lp = rgb_from_uv(mu);
                let (value, gl) = metric_with_grad(metric, lp, ex.truth_rgb, ex.mu_t);
                let g_mu = [-gl[0] * lp[0], -gl[2] * lp[2]];
                let g_p = (0..n)
                    .map(|i| {
                        let x = self.centre(i);
                        g_mu[0] * x[0] + g_mu[1] * x[1]
                    })
                    .collect();
                (value, g_p)
            }
        }
    }
}

/// One labelled thumbnail.
#[derive(Clone, Debug)]
pub struct AwbExample {
    pub thumbnail: LinearImage<f64>,
    pub exposure_time: f64,
    pub gain: f64,
    pub iso_ratio: f64,
    pub face: Option<Vec<f64>>,
    /// Annotated illuminant, sensor RGB.
    pub illuminant: [f64; 3],
    /// Mean colour of the true white-balanced image.
    pub mu_t: [f64; 3],
}

/// An example with features extracted and truth expressed in canonical space.
#[derive(Clone, Debug)]
pub struct PreparedExample {
    pub features: Features,
    pub beta: [f64; SETS],
    pub truth_uv: [f64; 2],
    pub truth_rgb: [f64; 3],
    pub mu_t: [f64; 3],
}

fn example_features(ex: &AwbExample, calib: Option<&CalibrationMap>, config: &AwbConfig) -> Result<Features> {
    features(
        &ex.thumbnail,
        ex.exposure_time,
        ex.gain,
        ex.iso_ratio,
        ex.face.as_deref(),
        calib,
        config,
    )
}

fn prepare(ex: &AwbExample, features: Features, centres: &[f64; SETS], calib: Option<&CalibrationMap>) -> Result<PreparedExample> {
    let mut uv = log_uv(ex.illuminant).ok_or_else(|| Error::InvalidParameter("illuminant must be positive".into()))?;
    if let Some(c) = calib {
        uv = c.forward(uv);
    }
    Ok(PreparedExample {
        beta: brightness_blend(features.log_brightness, centres),
        features,
        truth_uv: uv,
        truth_rgb: rgb_from_uv(uv),
        mu_t: ex.mu_t,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub iterations: usize,
    pub learning_rate: f64,
    pub filter_penalty: f64,
    pub bias_penalty: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            iterations: 60,
            learning_rate: 0.1,
            filter_penalty: 1e-3,
            bias_penalty: 1e-3,
        }
    }
}

/// Minimum number of training examples.
pub const MIN_TRAINING_EXAMPLES: usize = 50;

/// Mean loss plus quadratic penalty over prepared examples, and its gradient.
pub fn objective(
    model: &ChromaHistogramModel,
    data: &[PreparedExample],
    loss: Loss,
    params: &TrainParams,
) -> (f64, Vec<f64>, Vec<f64>) {
    use rayon::prelude::*;
    let nf = model.filters.len();
    let nb = model.bias.len();
    // fixed chunking keeps the summation order, and so the result, independent of scheduling
    let partials: Vec<(f64, Vec<f64>, Vec<f64>)> = data
        .par_chunks(8)
        .map(|chunk| {
            let (mut gf, mut gb) = (vec![0.0; nf], vec![0.0; nb]);
            let s = chunk.iter().map(|ex| model.loss_and_grad(ex, loss, &mut gf, &mut gb)).sum();
            (s, gf, gb)
        })
        .collect();
    let (mut sum, mut gf, mut gb) = (0.0, vec![0.0; nf], vec![0.0; nb]);
    for (s, pf, pb) in partials {
        sum += s;
        gf.iter_mut().zip(&pf).for_each(|(a, b)| *a += b);
        gb.iter_mut().zip(&pb).for_each(|(a, b)| *a += b);
    }
    let n = data.len().max(1) as f64;
    let mut value = sum / n;
    for (g, &w) in gf.iter_mut().zip(&model.filters) {
        *g = *g / n + 2.0 * params.filter_penalty * w;
        value += params.filter_penalty * w * w;
    }
    for (g, &w) in gb.iter_mut().zip(&model.bias) {
        *g = *g / n + 2.0 * params.bias_penalty * w;
        value += params.bias_penalty * w * w;
    }
    (value, gf, gb)
}

/// Brightness centres: 12.5/37.5/62.5/87.5th percentiles.
pub fn brightness_centres(ls: &[f64]) -> [f64; SETS] {
    [12.5, 37.5, 62.5, 87.5].map(|p| percentile(ls, p))
}

/// Features and brightness centres for a training set.
pub fn prepare_dataset(
    examples: &[AwbExample],
    calib: Option<&CalibrationMap>,
    config: &AwbConfig,
) -> Result<(Vec<PreparedExample>, [f64; SETS])> {
    use rayon::prelude::*;
    let feats: Vec<Features> = examples
        .par_iter()
        .map(|e| example_features(e, calib, config))
        .collect::<Result<_>>()?;
    let ls: Vec<f64> = feats.iter().map(|f| f.log_brightness).collect();
    let centres = brightness_centres(&ls);
    let prepared = examples
        .iter()
        .zip(feats)
        .map(|(e, f)| prepare(e, f, &centres, calib))
        .collect::<Result<_>>()?;
    Ok((prepared, centres))
}

/// Adam from a delta-filter initialization on the pixel and edge channels.
pub fn train_model(
    examples: &[AwbExample],
    loss: Loss,
    calib: Option<&CalibrationMap>,
    config: &AwbConfig,
    params: &TrainParams,
) -> Result<ChromaHistogramModel> {
    config.validate()?;
    if examples.len() < MIN_TRAINING_EXAMPLES {
        return Err(Error::InvalidParameter(format!(
            "training needs at least {MIN_TRAINING_EXAMPLES} examples, got {}",
            examples.len()
        )));
    }
    let (data, centres) = prepare_dataset(examples, calib, config)?;
    train_prepared(&data, centres, loss, config, params)
}

pub fn train_prepared(
    data: &[PreparedExample],
    centres: [f64; SETS],
    loss: Loss,
    config: &AwbConfig,
    params: &TrainParams,
) -> Result<ChromaHistogramModel> {
    let mut model = ChromaHistogramModel::untrained(config.clone(), centres);
    let taps = config.taps();
    let centre_tap = taps / 2;
    for k in 0..SETS {
        for ch in 0..2 {
            model.filters[(k * CHANNELS + ch) * taps + centre_tap] = 1.0;
        }
    }
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let np = model.parameter_count();
    let (mut m, mut v) = (vec![0.0; np], vec![0.0; np]);
    let nf = model.filters.len();
    for it in 1..=params.iterations {
        let (value, gf, gb) = objective(&model, data, loss, params);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("training loss became {value} at iteration {it}")));
        }
        let lr = params.learning_rate * (1.0 - b2.powi(it as i32)).sqrt() / (1.0 - b1.powi(it as i32));
        for (i, g) in gf.iter().chain(&gb).enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let step = lr * m[i] / (v[i].sqrt() + eps);
            if i < nf {
                model.filters[i] -= step;
            } else {
                model.bias[i - nf] -= step;
            }
        }
        log::debug!("awb {} iteration {it}: objective {value:.6}", loss.name());
    }
    model.trained = true;
    Ok(model)
}

/// White-point estimate for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IlluminantEstimate {
    /// Illuminant RGB in sensor space, unit green.
    pub rgb: [f64; 3],
    /// White-balance gains 1 / rgb, unit green.
    pub gains: [f64; 3],
    pub uv_canonical: [f64; 2],
    pub uv_sensor: [f64; 2],
    pub inverse_iterations: usize,
    /// How the estimate was produced: "model" or "gray-world".
    pub method: String,
}

impl IlluminantEstimate {
    pub fn from_rgb(rgb: [f64; 3], method: &str) -> Result<Self> {
        check_positive(&rgb, "illuminant")?;
        let g = rgb[1];
        let rgb = rgb.map(|c| c / g);
        let uv = log_uv(rgb).expect("positive");
        Ok(IlluminantEstimate {
            rgb,
            gains: rgb.map(|c| 1.0 / c),
            uv_canonical: uv,
            uv_sensor: uv,
            inverse_iterations: 0,
            method: method.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Model estimate; the canonical centroid is mapped back to sensor space.
pub fn predict_illuminant<T: Real>(
    model: &ChromaHistogramModel,
    thumb: &LinearImage<T>,
    exposure_time: f64,
    gain: f64,
    iso_ratio: f64,
    face: Option<&[f64]>,
    calib: Option<&CalibrationMap>,
) -> Result<IlluminantEstimate> {
    if !model.trained {
        return Err(Error::Untrained);
    }
    model.check()?;
    let f = features(thumb, exposure_time, gain, iso_ratio, face, calib, &model.config)?;
    let post = model.posterior(&f);
    let (uv_sensor, inverse_iterations) = match calib {
        Some(c) => {
            let s = c.inverse(post.mean)?;
            (s.x, s.iterations)
        }
        None => (post.mean, 0),
    };
    let rgb = rgb_from_uv(uv_sensor);
    Ok(IlluminantEstimate {
        rgb,
        gains: rgb.map(|c| 1.0 / c),
        uv_canonical: post.mean,
        uv_sensor,
        inverse_iterations,
        method: "model".into(),
    })
}

/// Mean RGB of the thumbnail as the illuminant.
pub fn gray_world<T: Real>(thumb: &LinearImage<T>) -> Result<IlluminantEstimate> {
    let mut s = [0.0; 3];
    for p in thumb.data.chunks_exact(3) {
        for c in 0..3 {
            s[c] += p[c].as_f64();
        }
    }
    if s.iter().any(|&v| !(v > 0.0)) {
        return IlluminantEstimate::from_rgb([1.0; 3], "gray-world");
    }
    IlluminantEstimate::from_rgb(s, "gray-world")
}

/// Mean and mean of the worst quarter of a list of errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub mean: f64,
    pub worst25: f64,
}

impl ErrorSummary {
    pub fn of(errors: &[f64]) -> Self {
        let mut v = errors.to_vec();
        v.sort_by(|a, b| b.total_cmp(a));
        let n = v.len().max(1);
        let q = n.div_ceil(4);
        ErrorSummary {
            mean: v.iter().sum::<f64>() / n as f64,
            worst25: v.iter().take(q).sum::<f64>() / q as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub loss: Option<Loss>,
    pub examples: usize,
    pub angular: ErrorSummary,
    pub reproduction: ErrorSummary,
    pub are: ErrorSummary,
}

/// Errors of a model's canonical-space estimate against prepared truth.
pub fn evaluate_prepared(model: &ChromaHistogramModel, data: &[PreparedExample]) -> Result<[Vec<f64>; 3]> {
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    for ex in data {
        let lp = rgb_from_uv(model.posterior(&ex.features).mean);
        out[0].push(angular_error(lp, ex.truth_rgb)?);
        out[1].push(reproduction_error(lp, ex.truth_rgb)?);
        out[2].push(anisotropic_reproduction_error(lp, ex.truth_rgb, ex.mu_t)?);
    }
    Ok(out)
}

fn summarize(loss: Option<Loss>, errs: &[Vec<f64>; 3]) -> EvalReport {
    EvalReport {
        loss,
        examples: errs[0].len(),
        angular: ErrorSummary::of(&errs[0]),
        reproduction: ErrorSummary::of(&errs[1]),
        are: ErrorSummary::of(&errs[2]),
    }
}

pub fn evaluate(model: &ChromaHistogramModel, examples: &[AwbExample], calib: Option<&CalibrationMap>) -> Result<EvalReport> {
    let data = examples
        .iter()
        .map(|e| prepare(e, example_features(e, calib, &model.config)?, &model.l_centres, calib))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(None, &evaluate_prepared(model, &data)?))
}

/// Three-fold cross-validation; example i belongs to fold i mod 3. With
/// `loss = None` the untrained model is evaluated on each fold.
pub fn cross_validate(
    examples: &[AwbExample],
    loss: Option<Loss>,
    calib: Option<&CalibrationMap>,
    config: &AwbConfig,
    params: &TrainParams,
) -> Result<EvalReport> {
    const FOLDS: usize = 3;
    config.validate()?;
    let feats: Vec<Features> = examples
        .iter()
        .map(|e| example_features(e, calib, config))
        .collect::<Result<_>>()?;
    let mut errs = [Vec::new(), Vec::new(), Vec::new()];
    for fold in 0..FOLDS {
        let train_idx: Vec<usize> = (0..examples.len()).filter(|i| i % FOLDS != fold).collect();
        let val_idx: Vec<usize> = (0..examples.len()).filter(|i| i % FOLDS == fold).collect();
        let ls: Vec<f64> = train_idx.iter().map(|&i| feats[i].log_brightness).collect();
        let centres = brightness_centres(&ls);
        let prep = |idx: &[usize]| -> Result<Vec<PreparedExample>> {
            idx.iter()
                .map(|&i| prepare(&examples[i], feats[i].clone(), &centres, calib))
                .collect()
        };
        let (train, val) = (prep(&train_idx)?, prep(&val_idx)?);
        let model = match loss {
            Some(l) => train_prepared(&train, centres, l, config, params)?,
            None => ChromaHistogramModel::untrained(config.clone(), centres),
        };
        let e = evaluate_prepared(&model, &val)?;
        for m in 0..3 {
            errs[m].extend_from_slice(&e[m]);
        }
    }
    Ok(summarize(loss, &errs))
}

/// Dataset index entry as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    /// 16-bit linear PPM thumbnail, relative to the index.
    pub thumbnail: PathBuf,
    pub exposure_time_s: f64,
    pub gain: f64,
    #[serde(default = "one")]
    pub iso_ratio: f64,
    pub illuminant: [f64; 3],
    pub mu_t: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub face_mask: Option<PathBuf>,
}

fn one() -> f64 {
    1.0
}

/// Name of the index file inside a dataset directory.
pub const DATASET_INDEX: &str = "dataset.json";

/// Scale between [0, 1] thumbnail values and 16-bit PPM samples.
const THUMB_SCALE: f64 = 65535.0;

pub fn write_thumbnail(path: &Path, thumb: &LinearImage<f64>) -> Result<()> {
    crate::pnm::write(
        path,
        &crate::pnm::Pnm {
            width: thumb.width,
            height: thumb.height,
            channels: 3,
            maxval: 65535,
            data: thumb.data.iter().map(|v| (v.clamp(0.0, 1.0) * THUMB_SCALE).round() as u16).collect(),
        },
    )
}

pub fn read_thumbnail(path: &Path) -> Result<LinearImage<f64>> {
    let img = crate::pnm::read(path)?;
    if img.channels != 3 {
        return Err(Error::CorruptHeader {
            path: path.to_path_buf(),
            reason: "thumbnail must be an RGB PPM".into(),
        });
    }
    let s = 1.0 / img.maxval as f64;
    LinearImage::from_vec(img.width, img.height, 3, img.data.iter().map(|&v| v as f64 * s).collect())
}

pub fn save_dataset(dir: &Path, examples: &[AwbExample]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let name = PathBuf::from(format!("thumb_{i:04}.ppm"));
        write_thumbnail(&dir.join(&name), &ex.thumbnail)?;
        index.push(DatasetEntry {
            thumbnail: name,
            exposure_time_s: ex.exposure_time,
            gain: ex.gain,
            iso_ratio: ex.iso_ratio,
            illuminant: ex.illuminant,
            mu_t: ex.mu_t,
            face_mask: None,
        });
    }
    crate::synth_oracle::write_json(&dir.join(DATASET_INDEX), &index)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<AwbExample>> {
    let path = dir.join(DATASET_INDEX);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: Vec<DatasetEntry> = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    index
        .into_iter()
        .map(|e| {
            let thumbnail = read_thumbnail(&dir.join(&e.thumbnail))?;
            let face = e
                .face_mask
                .map(|p| -> Result<Vec<f64>> {
                    let m = crate::raw_model::load_weight_map(&dir.join(p))?;
                    if m.width != thumbnail.width || m.height != thumbnail.height {
                        return Err(Error::SizeMismatch("face mask does not match its thumbnail".into()));
                    }
                    Ok(m.data)
                })
                .transpose()?;
            Ok(AwbExample {
                thumbnail,
                exposure_time: e.exposure_time_s,
                gain: e.gain,
                iso_ratio: e.iso_ratio,
                face,
                illuminant: e.illuminant,
                mu_t: e.mu_t,
            })
        })
        .collect()
}
