//! Pre-capture motion metering.
//!
//! Flow magnitude is estimated per frame pair with a gradient bound, refined
//! to a coarse grid, collapsed to a weighted scalar per pair, and modelled
//! with a three-component Gaussian mixture. The mixture predicts an upper
//! bound on the smallest motion among the next few frames, which together
//! with the gyro stability check shapes the exposure schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raw_model::{gaussian_downsample, Burst, GyroTrace, LinearImage, NoiseModel};
use crate::scalar::Real;

/// Grid of motion magnitudes in pixels per frame interval.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionField<T> {
    pub width: usize,
    pub height: usize,
    pub magnitude: Vec<T>,
    pub valid: Vec<bool>,
}

impl<T: Real> MotionField<T> {
    pub fn new(width: usize, height: usize) -> Self {
        MotionField {
            width,
            height,
            magnitude: vec![T::zero(); width * height],
            valid: vec![false; width * height],
        }
    }

    /// Field with every bin valid.
    pub fn from_values(width: usize, height: usize, magnitude: Vec<T>) -> Result<Self> {
        if magnitude.len() != width * height {
            return Err(Error::SizeMismatch(format!(
                "{} magnitudes for a {width}x{height} field",
                magnitude.len()
            )));
        }
        Ok(MotionField {
            width,
            height,
            valid: vec![true; magnitude.len()],
            magnitude,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<T> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.magnitude[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn valid_values(&self) -> impl Iterator<Item = T> + '_ {
        self.magnitude
            .iter()
            .zip(&self.valid)
            .filter_map(|(&m, &v)| v.then_some(m))
    }
}

/// Tuning for metering and capture planning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeteringParams {
    /// Gradients below `noise_mask_k * sigma` are masked.
    pub noise_mask_k: f64,
    /// Allowed motion blur per frame, pixels at merge resolution.
    pub blur_budget_px: f64,
    pub p_conf: f64,
    /// Number of past motion samples the mixture is fitted to.
    pub history_len: usize,
    /// Reference candidates: the reference is picked from the first K frames.
    pub reference_pool_k: usize,
    pub max_exposure_handheld_s: f64,
    pub max_exposure_stable_s: f64,
    pub total_capture_budget_s: f64,
    pub max_frames: usize,
    pub gain_max: f64,
    /// Gain at which the schedule begins raising exposure and gain together.
    pub gain_knee: f64,
    /// Average angular speed below which the camera counts as braced, rad/s.
    pub stability_threshold_rad_s: f64,
    /// Gyro averaging window start before the shutter, seconds.
    pub gyro_window_s: f64,
    /// Gyro readings this close to the shutter are ignored, seconds.
    pub gyro_mask_s: f64,
    pub refined_width: usize,
    pub refined_height: usize,
    /// Metering frames are downsampled until no wider than this.
    pub metering_max_width: usize,
}

impl Default for MeteringParams {
    fn default() -> Self {
        MeteringParams {
            noise_mask_k: 2.5,
            blur_budget_px: 3.0,
            p_conf: 0.9,
            history_len: 10,
            reference_pool_k: 4,
            max_exposure_handheld_s: 0.333,
            max_exposure_stable_s: 1.0,
            total_capture_budget_s: 6.0,
            max_frames: 13,
            gain_max: 96.0,
            gain_knee: 96.0,
            stability_threshold_rad_s: 0.006,
            gyro_window_s: 1.466,
            gyro_mask_s: 0.400,
            refined_width: 16,
            refined_height: 12,
            metering_max_width: 256,
        }
    }
}

impl MeteringParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if !(self.p_conf > 0.0 && self.p_conf < 1.0) {
            return bad("p_conf must lie in (0, 1)");
        }
        if !(self.blur_budget_px > 0.0) {
            return bad("blur budget must be positive");
        }
        if !(self.max_exposure_handheld_s > 0.0)
            || self.max_exposure_handheld_s > self.max_exposure_stable_s
        {
            return bad("handheld exposure cap must be positive and not exceed the stable cap");
        }
        if self.max_frames == 0 || self.reference_pool_k == 0 {
            return bad("max_frames and reference_pool_k must be positive");
        }
        if !(self.gain_max >= 1.0) || !(self.gain_knee >= 1.0) || self.gain_knee > self.gain_max {
            return bad("gains must satisfy 1 <= gain_knee <= gain_max");
        }
        if !(self.total_capture_budget_s > 0.0) {
            return bad("capture budget must be positive");
        }
        if self.refined_width == 0 || self.refined_height == 0 {
            return bad("refined grid must be non-empty");
        }
        Ok(())
    }
}

/// Lower bound on flow magnitude, |dI/dt| / |grad I|, with low-gradient
/// pixels masked against the noise model. Border pixels are invalid.
pub fn bounded_flow<T: Real>(
    prev: &LinearImage<T>,
    curr: &LinearImage<T>,
    noise: &NoiseModel<T>,
    noise_mask_k: f64,
) -> Result<MotionField<T>> {
    if !prev.same_shape(curr) || prev.channels != 1 {
        return Err(Error::SizeMismatch(format!(
            "bounded flow needs two single-channel images of equal size, got {}x{}x{} and {}x{}x{}",
            prev.width, prev.height, prev.channels, curr.width, curr.height, curr.channels
        )));
    }
    let (w, h) = (prev.width, prev.height);
    let mut field = MotionField::new(w, h);
    if w < 3 || h < 3 {
        return Ok(field);
    }
    let quarter = T::lit(0.25);
    let half = T::lit(0.5);
    let k2 = T::lit(noise_mask_k * noise_mask_k);
    let (p, c) = (&prev.data, &curr.data);
    for y in 1..h - 1 {
        let row = y * w;
        for x in 1..w - 1 {
            let i = row + x;
            let gx = (p[i + 1] - p[i - 1] + c[i + 1] - c[i - 1]) * quarter;
            let gy = (p[i + w] - p[i - w] + c[i + w] - c[i - w]) * quarter;
            let g2 = gx * gx + gy * gy;
            let level = (p[i] + c[i]) * half;
            if g2 < k2 * noise.variance(level) {
                continue;
            }
            field.magnitude[i] = (c[i] - p[i]).abs() / g2.sqrt();
            field.valid[i] = true;
        }
    }
    Ok(field)
}

/// Nearest-rank percentile (`ceil(q * n)`-th order statistic) of `values`,
/// reordering the slice.
pub fn nearest_rank<T: Real>(values: &mut [T], q: f64) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let rank = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
    let (_, v, _) = values.select_nth_unstable_by(rank - 1, |a, b| a.partial_cmp(b).expect("finite"));
    Some(*v)
}

/// Downsamples the field to `out_w` x `out_h` bins, taking the 90th percentile
/// of the valid magnitudes in each source rectangle.
pub fn refine_field<T: Real>(field: &MotionField<T>, out_w: usize, out_h: usize) -> MotionField<T> {
    let mut out = MotionField::new(out_w, out_h);
    let mut scratch = Vec::new();
    for by in 0..out_h {
        let (y0, y1) = (by * field.height / out_h, (by + 1) * field.height / out_h);
        for bx in 0..out_w {
            let (x0, x1) = (bx * field.width / out_w, (bx + 1) * field.width / out_w);
            scratch.clear();
            for y in y0..y1 {
                for x in x0..x1 {
                    if let Some(v) = field.get(x, y) {
                        scratch.push(v);
                    }
                }
            }
            if let Some(v) = nearest_rank(&mut scratch, 0.9) {
                out.magnitude[by * out_w + bx] = v;
                out.valid[by * out_w + bx] = true;
            }
        }
    }
    out
}

/// Weighted scalar motion for one frame pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSample {
    pub value: f64,
    /// No valid bin carried weight.
    pub no_signal: bool,
}

/// Isotropic Gaussian centred on the grid with sigma of a quarter of its width.
pub fn center_weights<T: Real>(width: usize, height: usize) -> LinearImage<T> {
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    let s = width as f64 / 4.0;
    LinearImage::from_fn(width, height, |x, y| {
        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
        T::lit((-d2 / (2.0 * s * s)).exp())
    })
}

/// Resamples a weight map (for example a face mask) onto a refined grid by box averaging.
pub fn resample_weights<T: Real>(map: &LinearImage<T>, width: usize, height: usize) -> LinearImage<T> {
    let mut out = LinearImage::new(width, height, 1);
    for by in 0..height {
        let (y0, y1) = (by * map.height / height, ((by + 1) * map.height / height).max(by * map.height / height + 1));
        for bx in 0..width {
            let (x0, x1) = (bx * map.width / width, ((bx + 1) * map.width / width).max(bx * map.width / width + 1));
            let mut acc = T::zero();
            let mut n = 0usize;
            for y in y0..y1.min(map.height) {
                for x in x0..x1.min(map.width) {
                    acc = acc + map.at(x, y);
                    n += 1;
                }
            }
            out.set(bx, by, if n > 0 { acc / T::from_usize_lossy(n) } else { T::zero() });
        }
    }
    out
}

/// sum(w v) / sum(w) over the valid bins.
pub fn weighted_average<T: Real>(field: &MotionField<T>, weights: &LinearImage<T>) -> Result<MotionSample> {
    if weights.width != field.width || weights.height != field.height || weights.channels != 1 {
        return Err(Error::SizeMismatch(format!(
            "weights {}x{} do not match field {}x{}",
            weights.width, weights.height, field.width, field.height
        )));
    }
    if weights.data.iter().any(|&w| w < T::zero() || !w.is_finite()) {
        return Err(Error::InvalidParameter("weights must be finite and non-negative".into()));
    }
    if weights.data.iter().all(|&w| w == T::zero()) {
        return Err(Error::InvalidParameter("weight map is all zero".into()));
    }
    let mut num = T::zero();
    let mut den = T::zero();
    for ((&m, &valid), &w) in field.magnitude.iter().zip(&field.valid).zip(&weights.data) {
        if valid {
            num = num + w * m;
            den = den + w;
        }
    }
    if den > T::zero() {
        Ok(MotionSample {
            value: (num / den).as_f64(),
            no_signal: false,
        })
    } else {
        Ok(MotionSample {
            value: 0.0,
            no_signal: true,
        })
    }
}

/// One mixture component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent<T> {
    pub weight: T,
    pub mean: T,
    pub variance: T,
}

/// Three-component one-dimensional Gaussian mixture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gmm<T> {
    pub components: [GmmComponent<T>; 3],
}

/// Variance floor used when fitting, px².
pub const GMM_VARIANCE_FLOOR: f64 = 0.05 * 0.05;
const GMM_WEIGHT_FLOOR: f64 = 1e-3;
const GMM_MAX_ITERS: usize = 100;
const GMM_TOL: f64 = 1e-6;

fn normal_cdf(x: f64, mean: f64, variance: f64) -> f64 {
    if variance <= 0.0 {
        return if x >= mean { 1.0 } else { 0.0 };
    }
    0.5 * libm::erfc(-(x - mean) / (2.0 * variance).sqrt())
}

impl<T: Real> Gmm<T> {
    /// A mixture with all mass at `value` (zero variance).
    pub fn point_mass(value: T) -> Self {
        let third = T::one() / T::lit(3.0);
        let c = GmmComponent {
            weight: third,
            mean: value,
            variance: T::zero(),
        };
        Gmm { components: [c; 3] }
    }

    pub fn cdf(&self, v: T) -> T {
        let v = v.as_f64();
        let p: f64 = self
            .components
            .iter()
            .map(|c| c.weight.as_f64() * normal_cdf(v, c.mean.as_f64(), c.variance.as_f64()))
            .sum();
        T::lit(p.clamp(0.0, 1.0))
    }

    pub fn mean(&self) -> T {
        self.components.iter().map(|c| c.weight * c.mean).sum()
    }

    pub fn variance(&self) -> T {
        let m = self.mean();
        self.components
            .iter()
            .map(|c| c.weight * (c.variance + c.mean * c.mean))
            .sum::<T>()
            - m * m
    }

    pub fn log_likelihood(&self, samples: &[T]) -> f64 {
        samples.iter().map(|&x| self.log_density(x.as_f64())).sum()
    }

    fn log_density(&self, x: f64) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|c| log_weighted_normal(x, c.weight.as_f64(), c.mean.as_f64(), c.variance.as_f64()))
            .collect();
        log_sum_exp(&terms)
    }

    /// Draws one sample using `u_pick` to choose the component and `z` as a standard normal deviate.
    pub fn sample_with(&self, u_pick: f64, z: f64) -> f64 {
        let mut acc = 0.0;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight.as_f64();
            if u_pick < acc || i == 2 {
                return c.mean.as_f64() + c.variance.as_f64().sqrt() * z;
            }
        }
        unreachable!()
    }
}

fn log_weighted_normal(x: f64, w: f64, mean: f64, var: f64) -> f64 {
    let var = var.max(1e-300);
    w.ln() - 0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean).powi(2) / var)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    let t = pos - i as f64;
    sorted[i] * (1.0 - t) + sorted[j] * t
}

fn em_from(samples: &[f64], means: [f64; 3], init_var: f64) -> (Gmm<f64>, f64) {
    let n = samples.len();
    let mut comps = means.map(|m| GmmComponent {
        weight: 1.0 / 3.0,
        mean: m,
        variance: init_var,
    });
    let mut resp = vec![[0.0f64; 3]; n];
    let mut prev_ll = f64::NEG_INFINITY;
    let mut ll = prev_ll;
    for _ in 0..GMM_MAX_ITERS {
        // E step
        ll = 0.0;
        for (x, r) in samples.iter().zip(resp.iter_mut()) {
            let lw: [f64; 3] = std::array::from_fn(|k| {
                log_weighted_normal(*x, comps[k].weight, comps[k].mean, comps[k].variance)
            });
            let lse = log_sum_exp(&lw);
            ll += lse;
            for k in 0..3 {
                r[k] = (lw[k] - lse).exp();
            }
        }
        // M step
        for k in 0..3 {
            let nk: f64 = resp.iter().map(|r| r[k]).sum();
            if nk <= 0.0 {
                comps[k].weight = 0.0;
                continue;
            }
            let mean = resp.iter().zip(samples).map(|(r, x)| r[k] * x).sum::<f64>() / nk;
            let var = resp
                .iter()
                .zip(samples)
                .map(|(r, x)| r[k] * (x - mean).powi(2))
                .sum::<f64>()
                / nk;
            comps[k].mean = mean;
            comps[k].variance = var.max(GMM_VARIANCE_FLOOR);
            comps[k].weight = nk / n as f64;
        }
        for c in comps.iter_mut() {
            c.weight = c.weight.max(GMM_WEIGHT_FLOOR);
        }
        let total: f64 = comps.iter().map(|c| c.weight).sum();
        for c in comps.iter_mut() {
            c.weight /= total;
        }
        if (ll - prev_ll).abs() < GMM_TOL {
            break;
        }
        prev_ll = ll;
    }
    (Gmm { components: comps }, ll)
}

/// Fits a three-component mixture with EM, restarting from three quantile
/// seeds and keeping the most likely fit. Fewer than three samples are padded
/// by repetition.
pub fn fit_gmm<T: Real>(samples: &[T]) -> Gmm<T> {
    let mut xs: Vec<f64> = samples.iter().map(|v| v.as_f64()).collect();
    if xs.is_empty() {
        return Gmm::point_mass(T::zero());
    }
    let mut i = 0;
    while xs.len() < 3 {
        xs.push(xs[i]);
        i += 1;
    }
    let mut sorted = xs.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
    let init_var = (var / 3.0).max(GMM_VARIANCE_FLOOR);
    let seeds = [[1.0 / 6.0, 0.5, 5.0 / 6.0], [0.05, 0.35, 0.8], [0.2, 0.65, 0.95]];
    let mut best: Option<(Gmm<f64>, f64)> = None;
    for q in seeds {
        let means = q.map(|p| quantile_sorted(&sorted, p));
        let (g, _) = em_from(&xs, means, init_var);
        let ll = g.log_likelihood(&xs);
        if best.as_ref().is_none_or(|(_, b)| ll > *b) {
            best = Some((g, ll));
        }
    }
    let g = best.expect("at least one restart").0;
    Gmm {
        components: g.components.map(|c| GmmComponent {
            weight: T::lit(c.weight),
            mean: T::lit(c.mean),
            variance: T::lit(c.variance),
        }),
    }
}

/// Probability that the smallest of `k` independent draws is at most `v`.
pub fn min_of_k_cdf<T: Real>(gmm: &Gmm<T>, k: usize, v: T) -> f64 {
    let f = gmm.cdf(v).as_f64();
    1.0 - (1.0 - f).powi(k as i32)
}

/// Smallest v >= 0 with 1 - (1 - F(v))^k >= p_conf, F the mixture CDF: an
/// upper bound on the minimum motion over the next `k` frames that holds with
/// probability `p_conf`. Found by bisection to 1e-6 px.
pub fn predict_min_motion<T: Real>(gmm: &Gmm<T>, k: usize, p_conf: f64) -> T {
    let k = k.max(1);
    let holds = |v: f64| min_of_k_cdf(gmm, k, T::lit(v)) >= p_conf;
    if holds(0.0) {
        return T::zero();
    }
    let mut hi = gmm
        .components
        .iter()
        .map(|c| c.mean.as_f64() + 12.0 * c.variance.as_f64().sqrt())
        .fold(1e-3, f64::max);
    while !holds(hi) {
        hi *= 2.0;
        if hi > 1e12 {
            return T::lit(hi);
        }
    }
    let mut lo = 0.0;
    while hi - lo > 1e-6 {
        let mid = 0.5 * (lo + hi);
        if holds(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    T::lit(hi)
}

/// Outcome of the gyro stability check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stability {
    pub stabilized: bool,
    pub avg_speed_rad_s: f64,
    /// Why the check fell back to handheld, if it did.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
}

impl Stability {
    pub fn handheld(reason: &str) -> Self {
        Stability {
            stabilized: false,
            avg_speed_rad_s: f64::NAN,
            fallback: Some(reason.to_string()),
        }
    }
}

/// Mean angular speed over [shutter - window, shutter - mask]. Readings
/// closest to the shutter press are excluded; less than half the window
/// covered counts as handheld.
pub fn detect_stability(gyro: &GyroTrace, shutter_time: f64, params: &MeteringParams) -> Stability {
    if gyro.is_empty() {
        return Stability::handheld("empty gyro trace");
    }
    let t0 = shutter_time - params.gyro_window_s;
    let t1 = shutter_time - params.gyro_mask_s;
    let inside: Vec<_> = gyro.samples().iter().filter(|s| s.t >= t0 && s.t <= t1).collect();
    if inside.len() < 2 {
        return Stability::handheld("gyro trace does not cover the averaging window");
    }
    let span = inside[inside.len() - 1].t - inside[0].t;
    if span < 0.5 * (t1 - t0) {
        return Stability::handheld("gyro trace does not cover the averaging window");
    }
    let avg = inside.iter().map(|s| s.speed()).sum::<f64>() / inside.len() as f64;
    Stability {
        stabilized: avg < params.stability_threshold_rad_s,
        avg_speed_rad_s: avg,
        fallback: None,
    }
}

/// Which limit, if any, prevented the schedule from meeting the requested sensitivity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleClamp {
    /// Exposure at its cap and gain at its maximum: the product falls short.
    Underexposed,
}

/// Factorization of a target sensitivity into exposure time and gain.
#[derive(Clone, Debug, PartialEq)]
pub struct ExposureSchedule {
    /// Blur-limiting exposure time; `None` when motion imposes no limit.
    pub blur_limit_s: Option<f64>,
    pub cap_s: f64,
    pub gain_knee: f64,
    pub gain_max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Exposure {
    pub exposure_time: f64,
    pub gain: f64,
    pub clamp: Option<ScheduleClamp>,
}

impl ExposureSchedule {
    /// Three regimes: exposure grows at unit gain up to the blur limit; gain
    /// grows to the knee; past the knee exposure and gain grow together (equal
    /// split in log space) until exposure reaches its cap and gain its maximum.
    pub fn decompose(&self, sensitivity: f64) -> Exposure {
        let t_flat = self.blur_limit_s.unwrap_or(self.cap_s).min(self.cap_s);
        if sensitivity <= t_flat {
            return Exposure {
                exposure_time: sensitivity,
                gain: 1.0,
                clamp: None,
            };
        }
        if sensitivity <= t_flat * self.gain_knee {
            return Exposure {
                exposure_time: t_flat,
                gain: sensitivity / t_flat,
                clamp: None,
            };
        }
        // past the knee: split the remaining factor between time and gain
        let remaining = sensitivity / (t_flat * self.gain_knee);
        let split = remaining.sqrt();
        let mut t = t_flat * split;
        let mut g = self.gain_knee * split;
        if t > self.cap_s {
            t = self.cap_s;
            g = sensitivity / t;
        }
        if g > self.gain_max {
            g = self.gain_max;
            t = (sensitivity / g).min(self.cap_s);
        }
        let clamp = (t * g < sensitivity * (1.0 - 1e-12)).then_some(ScheduleClamp::Underexposed);
        Exposure {
            exposure_time: t,
            gain: g,
            clamp,
        }
    }
}

/// Capture settings for the post-shutter burst.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapturePlan {
    pub exposure_time_s: f64,
    pub gain: f64,
    pub frame_count: usize,
    pub stabilized: bool,
    /// Predicted minimum motion, pixels per metering frame interval at merge resolution.
    pub predicted_v_min: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blur_limit_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clamp: Option<ScheduleClamp>,
}

/// Chooses exposure time, gain and frame count.
///
/// `gmm` is `None` when metering produced no usable motion signal; that and
/// a zero prediction both leave exposure limited only by stability.
/// `frame_interval_s` converts the per-frame motion prediction into seconds.
pub fn plan_capture(
    gmm: Option<&Gmm<f64>>,
    stability: &Stability,
    target_sensitivity: f64,
    frame_interval_s: f64,
    params: &MeteringParams,
) -> Result<CapturePlan> {
    params.validate()?;
    if !(target_sensitivity > 0.0) {
        return Err(Error::InvalidParameter("target sensitivity must be positive".into()));
    }
    let cap = if stability.stabilized {
        params.max_exposure_stable_s
    } else {
        params.max_exposure_handheld_s
    };
    let v_min = gmm.map_or(0.0, |g| predict_min_motion(g, params.reference_pool_k, params.p_conf));
    let blur_limit_s = (v_min > 0.0).then(|| params.blur_budget_px / v_min * frame_interval_s);
    let schedule = ExposureSchedule {
        blur_limit_s,
        cap_s: cap,
        gain_knee: params.gain_knee,
        gain_max: params.gain_max,
    };
    let exposure = schedule.decompose(target_sensitivity);
    let frame_count = ((params.total_capture_budget_s / exposure.exposure_time).floor() as usize)
        .min(params.max_frames)
        .max(1);
    Ok(CapturePlan {
        exposure_time_s: exposure.exposure_time,
        gain: exposure.gain,
        frame_count,
        stabilized: stability.stabilized,
        predicted_v_min: v_min,
        blur_limit_s,
        clamp: exposure.clamp,
    })
}

/// Mean of the last five samples.
pub fn mean_filter_predict(history: &[f64]) -> f64 {
    let tail = &history[history.len().saturating_sub(5)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

/// Windowed-sinc lowpass taps (Hamming window) with unit DC gain.
/// `cutoff` is relative to Nyquist.
pub fn hamming_fir(taps: usize, cutoff: f64) -> Vec<f64> {
    let m = (taps - 1) as f64;
    let mut h: Vec<f64> = (0..taps)
        .map(|n| {
            let t = n as f64 - m / 2.0;
            let x = cutoff * t;
            let sinc = if x == 0.0 {
                1.0
            } else {
                (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
            };
            let win = 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / m).cos();
            cutoff * sinc * win
        })
        .collect();
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= sum);
    h
}

/// Output of the 8-tap, 0.01-of-Nyquist Hamming FIR at the latest sample.
pub fn fir_filter_predict(history: &[f64]) -> f64 {
    let h = hamming_fir(8, 0.01);
    let n = history.len();
    let mut acc = 0.0;
    let mut norm = 0.0;
    for (i, &tap) in h.iter().enumerate() {
        if i < n {
            acc += tap * history[n - 1 - i];
            norm += tap;
        }
    }
    acc / norm
}

/// Mixture-based prediction of the minimum motion over the next `k` frames.
pub fn gmm_filter_predict(history: &[f64], k: usize, p_conf: f64) -> f64 {
    predict_min_motion(&fit_gmm(history), k, p_conf)
}

/// Metering image: half-resolution green plane, downsampled further until no
/// wider than `max_width`, plus the noise model of the result.
pub fn metering_image<T: Real>(
    mosaic: &LinearImage<T>,
    cfa: crate::raw_model::Cfa,
    noise: &NoiseModel<T>,
    max_width: usize,
) -> (LinearImage<T>, NoiseModel<T>) {
    let mut img = mosaic.green_quad(cfa);
    // two green sites averaged
    let mut var_scale = 0.5;
    // 2-D binomial filter: sum of squared weights
    let binomial_gain = (70.0f64 / 256.0).powi(2);
    while img.width > max_width && img.width >= 4 && img.height >= 4 {
        img = gaussian_downsample(&img);
        var_scale *= binomial_gain;
    }
    let s = T::lit(var_scale);
    let model = NoiseModel {
        slope: noise.slope * s,
        intercept: noise.intercept * s,
        ref_gain: noise.ref_gain,
    };
    (img, model)
}

/// Everything metering learned from a pre-shutter stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeteringReport {
    pub samples: Vec<MotionSample>,
    pub gmm: Option<Gmm<f64>>,
    pub stability: Stability,
    pub plan: CapturePlan,
}

/// Runs bounded flow over consecutive frame pairs of a metering stream and
/// plans the capture. Motion is converted to merge-resolution pixels.
pub fn meter_stream(
    burst: &Burst,
    weight_map: Option<&LinearImage<f64>>,
    target_sensitivity: f64,
    params: &MeteringParams,
) -> Result<MeteringReport> {
    params.validate()?;
    let m = &burst.manifest;
    let last = burst.len() - 1;
    let mosaics = burst.normalized::<f64>(last);
    let noise = burst.noise_for(last);
    let images: Vec<_> = mosaics
        .iter()
        .map(|mz| metering_image(mz, m.cfa, &noise, params.metering_max_width))
        .collect();
    let to_merge_px = burst.width() as f64 / images[0].0.width as f64;
    let weights = match weight_map {
        Some(map) => resample_weights(map, params.refined_width, params.refined_height),
        None => center_weights(params.refined_width, params.refined_height),
    };
    let mut samples = Vec::new();
    for pair in images.windows(2) {
        let field = bounded_flow(&pair[0].0, &pair[1].0, &pair[1].1, params.noise_mask_k)?;
        let refined = refine_field(&field, params.refined_width, params.refined_height);
        let s = weighted_average(&refined, &weights)?;
        samples.push(MotionSample {
            value: s.value * to_merge_px,
            no_signal: s.no_signal,
        });
    }
    let usable: Vec<f64> = samples
        .iter()
        .rev()
        .filter(|s| !s.no_signal)
        .take(params.history_len)
        .map(|s| s.value)
        .collect();
    let gmm = (!usable.is_empty()).then(|| fit_gmm(&usable));
    let shutter = m
        .shutter_time_s
        .unwrap_or_else(|| burst.frames[last].timestamp);
    let stability = match &m.gyro {
        Some(g) => detect_stability(g, shutter, params),
        None => Stability::handheld("no gyro trace"),
    };
    let interval = m.frame_interval_s.unwrap_or_else(|| {
        if burst.len() > 1 {
            (burst.frames[last].timestamp - burst.frames[0].timestamp) / last as f64
        } else {
            1.0 / 15.0
        }
    });
    let plan = plan_capture(gmm.as_ref(), &stability, target_sensitivity, interval, params)?;
    Ok(MeteringReport {
        samples,
        gmm,
        stability,
        plan,
    })
}
