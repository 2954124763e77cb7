//! Raw frames, burst manifests, the signal-dependent noise model, and the
//! normalized linear images and Gaussian pyramids every stage works on.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pnm;
use crate::scalar::Real;

/// Colour filter array layout, named by the 2x2 block read row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Cfa {
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}

/// Colour of a CFA site.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CfaColor {
    Red = 0,
    Green = 1,
    Blue = 2,
}

impl Cfa {
    /// Colours of the four 2x2 positions in plane order (0,0), (1,0), (0,1), (1,1).
    pub fn layout(self) -> [CfaColor; 4] {
        use CfaColor::*;
        match self {
            Cfa::Rggb => [Red, Green, Green, Blue],
            Cfa::Bggr => [Blue, Green, Green, Red],
            Cfa::Grbg => [Green, Red, Blue, Green],
            Cfa::Gbrg => [Green, Blue, Red, Green],
        }
    }

    /// Plane index (0..4) of mosaic site (x, y).
    #[inline]
    pub fn plane_of(x: usize, y: usize) -> usize {
        (y & 1) * 2 + (x & 1)
    }

    #[inline]
    pub fn color_at(self, x: usize, y: usize) -> CfaColor {
        self.layout()[Self::plane_of(x, y)]
    }

    /// Plane indices holding green samples.
    pub fn green_planes(self) -> [usize; 2] {
        match self {
            Cfa::Rggb | Cfa::Bggr => [1, 2],
            Cfa::Grbg | Cfa::Gbrg => [0, 3],
        }
    }
}

impl fmt::Display for Cfa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Cfa::Rggb => "RGGB",
            Cfa::Bggr => "BGGR",
            Cfa::Grbg => "GRBG",
            Cfa::Gbrg => "GBRG",
        };
        f.write_str(s)
    }
}

/// One Bayer mosaic with its capture metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct RawFrame {
    pub width: usize,
    pub height: usize,
    pub cfa: Cfa,
    /// Row-major mosaic samples in digital numbers.
    pub data: Vec<u16>,
    /// Black level per plane, in plane order (see [`Cfa::layout`]).
    pub black_level: [u16; 4],
    pub white_level: u16,
    pub exposure_time: f64,
    pub gain: f64,
    pub timestamp: f64,
}

impl RawFrame {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.data.len() != self.width * self.height {
            return Err(Error::InvalidFrame(format!(
                "{}x{} mosaic with {} samples",
                self.width,
                self.height,
                self.data.len()
            )));
        }
        if self.black_level.iter().any(|&b| b >= self.white_level) {
            return Err(Error::InvalidFrame(format!(
                "black level {:?} not below white level {}",
                self.black_level, self.white_level
            )));
        }
        if !(self.exposure_time > 0.0) || !self.exposure_time.is_finite() {
            return Err(Error::InvalidFrame(format!(
                "exposure time {} must be positive",
                self.exposure_time
            )));
        }
        if !(self.gain >= 1.0) || !self.gain.is_finite() {
            return Err(Error::InvalidFrame(format!("gain {} must be >= 1", self.gain)));
        }
        Ok(())
    }

    /// Exposure time times gain, the quantity brightness scales with.
    pub fn sensitivity(&self) -> f64 {
        self.exposure_time * self.gain
    }

    /// Clamps every sample to the white level.
    pub fn clamp_to_white(&mut self) {
        let w = self.white_level;
        self.data.iter_mut().for_each(|v| *v = (*v).min(w));
    }
}

/// Signal-dependent noise: variance = slope * x + intercept for normalized
/// signal x, specified at `ref_gain`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel<T> {
    pub slope: T,
    pub intercept: T,
    pub ref_gain: T,
}

impl<T: Real> NoiseModel<T> {
    pub fn new(slope: T, intercept: T) -> Self {
        NoiseModel {
            slope,
            intercept,
            ref_gain: T::one(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.slope >= T::zero()) || !(self.intercept >= T::zero()) {
            return Err(Error::InvalidParameter(format!(
                "noise slope {} and intercept {} must be non-negative",
                self.slope, self.intercept
            )));
        }
        if !(self.ref_gain > T::zero()) {
            return Err(Error::InvalidParameter("noise ref_gain must be positive".into()));
        }
        Ok(())
    }

    /// Model at another gain: shot noise scales with gain, read noise with gain².
    pub fn at_gain(&self, gain: T) -> Self {
        let r = gain / self.ref_gain;
        NoiseModel {
            slope: self.slope * r,
            intercept: self.intercept * r * r,
            ref_gain: gain,
        }
    }

    /// Variance at normalized signal `x`; strictly positive.
    #[inline]
    pub fn variance(&self, x: T) -> T {
        let v = self.slope * x.max(T::zero()) + self.intercept;
        v.max(T::lit(1e-12))
    }

    #[inline]
    pub fn sigma(&self, x: T) -> T {
        self.variance(x).sqrt()
    }

    pub fn cast<U: Real>(&self) -> NoiseModel<U> {
        NoiseModel {
            slope: U::lit(self.slope.as_f64()),
            intercept: U::lit(self.intercept.as_f64()),
            ref_gain: U::lit(self.ref_gain.as_f64()),
        }
    }
}

/// Normalized linear image: 0 is black level, 1 is white level.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearImage<T> {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Real> LinearImage<T> {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, T::zero())
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: T) -> Self {
        LinearImage {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::SizeMismatch(format!(
                "{} samples for {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(LinearImage {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        LinearImage {
            width,
            height,
            channels: 1,
            data,
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn at_c(&self, x: usize, y: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn set_c(&mut self, x: usize, y: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Sample with coordinates clamped to the image (edge replication).
    #[inline]
    pub fn at_clamped(&self, x: isize, y: isize) -> T {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.at(xc, yc)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.data.iter().copied().sum::<T>() / T::from_usize_lossy(self.data.len())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        LinearImage {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// One channel of a multi-channel image.
    pub fn channel(&self, c: usize) -> Self {
        LinearImage {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().skip(c).step_by(self.channels).copied().collect(),
        }
    }

    /// Splits a mosaic into its four half-resolution CFA planes, in plane order.
    pub fn cfa_planes(&self) -> [LinearImage<T>; 4] {
        let w = self.width / 2;
        let h = self.height / 2;
        std::array::from_fn(|p| {
            let (ox, oy) = (p & 1, p >> 1);
            LinearImage::from_fn(w, h, |x, y| self.at(2 * x + ox, 2 * y + oy))
        })
    }

    /// Reassembles a mosaic from four CFA planes.
    pub fn from_cfa_planes(planes: &[LinearImage<T>; 4]) -> Self {
        let w = planes[0].width;
        let h = planes[0].height;
        LinearImage::from_fn(2 * w, 2 * h, |x, y| {
            planes[Cfa::plane_of(x, y)].at(x / 2, y / 2)
        })
    }

    /// Half-resolution green plane: the mean of both green sites of each quad.
    pub fn green_quad(&self, cfa: Cfa) -> Self {
        let [g0, g1] = cfa.green_planes();
        let half = T::lit(0.5);
        LinearImage::from_fn(self.width / 2, self.height / 2, |x, y| {
            let s0 = self.at(2 * x + (g0 & 1), 2 * y + (g0 >> 1));
            let s1 = self.at(2 * x + (g1 & 1), 2 * y + (g1 >> 1));
            (s0 + s1) * half
        })
    }

    pub fn cast<U: Real>(&self) -> LinearImage<U> {
        LinearImage {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Normalizes a mosaic to [0, 1]: (raw - black) / (white - black), clamped.
pub fn normalize<T: Real>(frame: &RawFrame) -> LinearImage<T> {
    normalize_relative(frame, 1.0)
}

/// Normalizes and then multiplies by `scale`, used to bring frames of
/// differing exposure to a common brightness
/// (`scale = reference_sensitivity / frame_sensitivity`).
pub fn normalize_relative<T: Real>(frame: &RawFrame, scale: f64) -> LinearImage<T> {
    let white = frame.white_level as f64;
    let inv: [f64; 4] = std::array::from_fn(|p| 1.0 / (white - frame.black_level[p] as f64));
    let mut data = Vec::with_capacity(frame.data.len());
    for y in 0..frame.height {
        for x in 0..frame.width {
            let p = Cfa::plane_of(x, y);
            let raw = frame.data[y * frame.width + x] as f64;
            let v = ((raw - frame.black_level[p] as f64) * inv[p]).clamp(0.0, 1.0);
            data.push(T::lit(v * scale));
        }
    }
    LinearImage {
        width: frame.width,
        height: frame.height,
        channels: 1,
        data,
    }
}

/// Inverse of [`normalize`] for a mosaic: rounds to the nearest digital number.
pub fn denormalize<T: Real>(image: &LinearImage<T>, black_level: [u16; 4], white_level: u16) -> Vec<u16> {
    let white = white_level as f64;
    let mut out = Vec::with_capacity(image.data.len());
    for y in 0..image.height {
        for x in 0..image.width {
            let b = black_level[Cfa::plane_of(x, y)] as f64;
            let v = image.at(x, y).as_f64().clamp(0.0, 1.0);
            out.push((b + v * (white - b)).round().clamp(0.0, white) as u16);
        }
    }
    out
}

/// Exposure scale that maps `frame` onto the brightness of `reference`.
pub fn relative_exposure(frame: &RawFrame, reference: &RawFrame) -> f64 {
    reference.sensitivity() / frame.sensitivity()
}

const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Separable 5-tap binomial blur with edge replication, then 2x decimation.
pub fn gaussian_downsample<T: Real>(image: &LinearImage<T>) -> LinearImage<T> {
    let k: [T; 5] = BINOMIAL5.map(T::lit);
    let (w, h, ch) = (image.width, image.height, image.channels);
    let (ow, oh) = (w / 2, h / 2);
    // horizontal pass only at the even columns we keep
    let mut tmp = vec![T::zero(); ow * h * ch];
    for y in 0..h {
        for ox in 0..ow {
            let cx = (2 * ox) as isize;
            for c in 0..ch {
                let mut acc = T::zero();
                for (i, &kv) in k.iter().enumerate() {
                    let sx = (cx + i as isize - 2).clamp(0, w as isize - 1) as usize;
                    acc = acc + kv * image.data[(y * w + sx) * ch + c];
                }
                tmp[(y * ow + ox) * ch + c] = acc;
            }
        }
    }
    let mut out = vec![T::zero(); ow * oh * ch];
    for oy in 0..oh {
        let cy = (2 * oy) as isize;
        for ox in 0..ow {
            for c in 0..ch {
                let mut acc = T::zero();
                for (i, &kv) in k.iter().enumerate() {
                    let sy = (cy + i as isize - 2).clamp(0, h as isize - 1) as usize;
                    acc = acc + kv * tmp[(sy * ow + ox) * ch + c];
                }
                out[(oy * ow + ox) * ch + c] = acc;
            }
        }
    }
    LinearImage {
        width: ow,
        height: oh,
        channels: ch,
        data: out,
    }
}

/// Default pyramid depth.
pub const PYRAMID_LEVELS: usize = 4;

/// Gaussian pyramid whose coarsest level is at least 1x1 pixels.
pub fn build_pyramid<T: Real>(image: &LinearImage<T>, levels: usize) -> Result<Vec<LinearImage<T>>> {
    build_pyramid_min(image, levels, 1)
}

/// Gaussian pyramid whose coarsest level must be at least `min_dim` on each axis.
pub fn build_pyramid_min<T: Real>(
    image: &LinearImage<T>,
    levels: usize,
    min_dim: usize,
) -> Result<Vec<LinearImage<T>>> {
    if levels == 0 {
        return Err(Error::InvalidParameter("pyramid needs at least one level".into()));
    }
    let shrink = 1usize << (levels - 1);
    if image.width / shrink < min_dim.max(1) || image.height / shrink < min_dim.max(1) {
        return Err(Error::ImageTooSmall {
            width: image.width,
            height: image.height,
            levels,
        });
    }
    let mut pyramid = Vec::with_capacity(levels);
    pyramid.push(image.clone());
    for _ in 1..levels {
        let next = gaussian_downsample(pyramid.last().expect("non-empty"));
        pyramid.push(next);
    }
    Ok(pyramid)
}

/// One gyroscope reading.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GyroSample {
    #[serde(rename = "t_s")]
    pub t: f64,
    pub wx: f64,
    pub wy: f64,
    pub wz: f64,
}

impl GyroSample {
    pub fn speed(&self) -> f64 {
        (self.wx * self.wx + self.wy * self.wy + self.wz * self.wz).sqrt()
    }
}

/// Gyroscope readings with strictly increasing timestamps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GyroTrace {
    samples: Vec<GyroSample>,
}

impl GyroTrace {
    pub fn new(samples: Vec<GyroSample>) -> Result<Self> {
        if samples.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(Error::InvalidParameter(
                "gyro timestamps must be strictly increasing".into(),
            ));
        }
        Ok(GyroTrace { samples })
    }

    pub fn samples(&self) -> &[GyroSample] {
        &self.samples
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Black level written either as one number or one per CFA plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BlackLevelSpec {
    Uniform(u16),
    PerPlane([u16; 4]),
}

impl BlackLevelSpec {
    pub fn per_plane(&self) -> [u16; 4] {
        match *self {
            BlackLevelSpec::Uniform(v) => [v; 4],
            BlackLevelSpec::PerPlane(v) => v,
        }
    }
}

/// Per-frame manifest entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub path: PathBuf,
    pub exposure_time_s: f64,
    pub gain: f64,
    #[serde(default)]
    pub timestamp_s: f64,
}

/// On-disk JSON manifest describing a burst.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub cfa: Cfa,
    pub black_level: BlackLevelSpec,
    pub white_level: u16,
    pub noise: NoiseModel<f64>,
    pub frames: Vec<FrameEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gyro: Option<Vec<GyroSample>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_map: Option<PathBuf>,
    /// Interval between frames of a metering stream, seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_interval_s: Option<f64>,
    /// Time of the shutter press on the gyro clock, seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shutter_time_s: Option<f64>,
    /// Exposure time x gain requested by auto-exposure.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_sensitivity_s: Option<f64>,
}

/// Validated burst description with paths resolved against the manifest directory.
#[derive(Clone, Debug, PartialEq)]
pub struct BurstManifest {
    pub cfa: Cfa,
    pub black_level: [u16; 4],
    pub white_level: u16,
    pub noise: NoiseModel<f64>,
    pub frames: Vec<FrameEntry>,
    pub gyro: Option<GyroTrace>,
    pub weight_map: Option<PathBuf>,
    pub frame_interval_s: Option<f64>,
    pub shutter_time_s: Option<f64>,
    pub target_sensitivity_s: Option<f64>,
}

/// A manifest together with its decoded frames.
#[derive(Clone, Debug)]
pub struct Burst {
    pub manifest: BurstManifest,
    pub frames: Vec<RawFrame>,
}

impl Burst {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    /// Builds a burst from in-memory frames, enforcing the shared-shape invariants.
    pub fn from_frames(frames: Vec<RawFrame>, noise: NoiseModel<f64>) -> Result<Self> {
        let first = frames.first().ok_or(Error::EmptyBurst)?;
        check_frames(&frames, first.width, first.height, first.cfa)?;
        let manifest = BurstManifest {
            cfa: first.cfa,
            black_level: first.black_level,
            white_level: first.white_level,
            noise,
            frames: frames
                .iter()
                .enumerate()
                .map(|(i, f)| FrameEntry {
                    path: PathBuf::from(format!("frame_{i:03}.pgm")),
                    exposure_time_s: f.exposure_time,
                    gain: f.gain,
                    timestamp_s: f.timestamp,
                })
                .collect(),
            gyro: None,
            weight_map: None,
            frame_interval_s: None,
            shutter_time_s: None,
            target_sensitivity_s: None,
        };
        Ok(Burst { manifest, frames })
    }

    /// Noise model at the gain of frame `index`.
    pub fn noise_for(&self, index: usize) -> NoiseModel<f64> {
        let g = self.frames[index].gain;
        self.manifest.noise.at_gain(g)
    }

    /// Normalized mosaics, each rescaled to the exposure of `reference`.
    pub fn normalized<T: Real>(&self, reference: usize) -> Vec<LinearImage<T>> {
        let r = &self.frames[reference];
        self.frames
            .iter()
            .map(|f| normalize_relative(f, relative_exposure(f, r)))
            .collect()
    }
}

fn check_frames(frames: &[RawFrame], w: usize, h: usize, cfa: Cfa) -> Result<()> {
    for (index, f) in frames.iter().enumerate() {
        if f.width != w || f.height != h {
            return Err(Error::DimensionMismatch {
                index,
                expected_w: w,
                expected_h: h,
                found_w: f.width,
                found_h: f.height,
            });
        }
        if f.cfa != cfa {
            return Err(Error::CfaMismatch {
                index,
                expected: cfa.to_string(),
                found: f.cfa.to_string(),
            });
        }
        f.validate()?;
    }
    Ok(())
}

/// Parses and validates a manifest without reading the frames.
pub fn load_manifest(path: &Path) -> Result<BurstManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ManifestFile = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    resolve_manifest(file, base).map_err(|e| match e {
        Error::InvalidParameter(reason) => Error::Manifest {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })
}

fn resolve_manifest(file: ManifestFile, base: &Path) -> Result<BurstManifest> {
    if file.frames.is_empty() {
        return Err(Error::EmptyBurst);
    }
    file.noise.validate()?;
    let black_level = file.black_level.per_plane();
    if black_level.iter().any(|&b| b >= file.white_level) {
        return Err(Error::InvalidParameter(format!(
            "black level {black_level:?} not below white level {}",
            file.white_level
        )));
    }
    let gyro = file.gyro.map(GyroTrace::new).transpose()?;
    let frames = file
        .frames
        .into_iter()
        .map(|mut e| {
            e.path = base.join(&e.path);
            e
        })
        .collect();
    Ok(BurstManifest {
        cfa: file.cfa,
        black_level,
        white_level: file.white_level,
        noise: file.noise,
        frames,
        gyro,
        weight_map: file.weight_map.map(|p| base.join(p)),
        frame_interval_s: file.frame_interval_s,
        shutter_time_s: file.shutter_time_s,
        target_sensitivity_s: file.target_sensitivity_s,
    })
}

/// Loads a manifest and every frame it references, validating the burst.
pub fn load_burst(manifest_path: &Path) -> Result<Burst> {
    let manifest = load_manifest(manifest_path)?;
    let mut frames = Vec::with_capacity(manifest.frames.len());
    let mut dims = None;
    for (index, entry) in manifest.frames.iter().enumerate() {
        let img = pnm::read(&entry.path)?;
        if img.channels != 1 {
            return Err(Error::CorruptHeader {
                path: entry.path.clone(),
                reason: "frame must be a single-channel PGM".into(),
            });
        }
        let (w, h) = *dims.get_or_insert((img.width, img.height));
        if img.width != w || img.height != h {
            return Err(Error::DimensionMismatch {
                index,
                expected_w: w,
                expected_h: h,
                found_w: img.width,
                found_h: img.height,
            });
        }
        let mut frame = RawFrame {
            width: img.width,
            height: img.height,
            cfa: manifest.cfa,
            data: img.data,
            black_level: manifest.black_level,
            white_level: manifest.white_level,
            exposure_time: entry.exposure_time_s,
            gain: entry.gain,
            timestamp: entry.timestamp_s,
        };
        frame.clamp_to_white();
        frame.validate().map_err(|e| match e {
            Error::InvalidFrame(r) => Error::InvalidFrame(format!("frame {index}: {r}")),
            other => other,
        })?;
        frames.push(frame);
    }
    Ok(Burst { manifest, frames })
}

/// Reads an 8-bit weight map, scaled to [0, 1].
pub fn load_weight_map(path: &Path) -> Result<LinearImage<f64>> {
    let img = pnm::read(path)?;
    if img.channels != 1 {
        return Err(Error::CorruptHeader {
            path: path.to_path_buf(),
            reason: "weight map must be a single-channel PGM".into(),
        });
    }
    let scale = 1.0 / img.maxval as f64;
    LinearImage::from_vec(
        img.width,
        img.height,
        1,
        img.data.iter().map(|&v| v as f64 * scale).collect(),
    )
}

/// Writes a mosaic frame as a 16-bit PGM.
pub fn write_frame(path: &Path, frame: &RawFrame) -> Result<()> {
    pnm::write_gray16(path, frame.width, frame.height, &frame.data)
}
