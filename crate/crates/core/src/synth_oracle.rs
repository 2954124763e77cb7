//! Seeded synthetic bursts and motion sequences, plus brute-force oracles
//! the tests compare the real implementations against.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Pareto, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion_metering::Gmm;
use crate::raw_model::{
    denormalize, write_frame, BlackLevelSpec, Burst, Cfa, CfaColor, FrameEntry, GyroSample, GyroTrace, LinearImage,
    ManifestFile, NoiseModel, RawFrame,
};
use crate::scalar::Real;

/// Normalized signal produced by one lux-second at unit gain on a white surface.
pub const SIGNAL_PER_LUX_SECOND: f64 = 0.01;

/// Procedural reflectance texture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Texture {
    /// Uniform reflectance.
    Flat,
    /// A single sinusoid: `0.5 + 0.5 * contrast * sin(2 pi (x cos a + y sin a) / period)`.
    Stripes { period: f64, angle: f64, contrast: f64 },
    /// Sum of `components` sinusoids with random directions, phases and
    /// periods log-uniform in [min_period, max_period].
    Sinusoids {
        components: usize,
        min_period: f64,
        max_period: f64,
        contrast: f64,
        seed: u64,
    },
}

struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: f64,
}

struct TextureEval {
    waves: Vec<Wave>,
    offset: f64,
}

impl TextureEval {
    fn new(t: &Texture) -> Self {
        use std::f64::consts::TAU;
        match *t {
            Texture::Flat => TextureEval {
                waves: vec![],
                offset: 0.5,
            },
            Texture::Stripes { period, angle, contrast } => TextureEval {
                waves: vec![Wave {
                    kx: TAU * angle.cos() / period,
                    ky: TAU * angle.sin() / period,
                    phase: 0.0,
                    amp: 0.5 * contrast,
                }],
                offset: 0.5,
            },
            Texture::Sinusoids {
                components,
                min_period,
                max_period,
                contrast,
                seed,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = components.max(1);
                let amp = 0.5 * contrast / (n as f64).sqrt() * 1.5;
                let waves = (0..n)
                    .map(|_| {
                        let a: f64 = rng.random::<f64>() * TAU;
                        let lp = min_period.ln() + rng.random::<f64>() * (max_period.ln() - min_period.ln());
                        let p = lp.exp();
                        Wave {
                            kx: TAU * a.cos() / p,
                            ky: TAU * a.sin() / p,
                            phase: rng.random::<f64>() * TAU,
                            amp,
                        }
                    })
                    .collect();
                TextureEval { waves, offset: 0.5 }
            }
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let v: f64 = self.waves.iter().map(|w| w.amp * (w.kx * x + w.ky * y + w.phase).sin()).sum();
        (self.offset + v).clamp(0.0, 1.0)
    }
}

/// Rectangle of unrelated content moving with its own velocity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MovingObject {
    /// Top-left corner and size in the first frame, mosaic pixels.
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
    /// Pixels per frame.
    pub velocity: [f64; 2],
    pub texture: Texture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticScene {
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_cfa")]
    pub cfa: Cfa,
    pub texture: Texture,
    /// Per-channel surface colour multiplying the texture.
    #[serde(default = "white")]
    pub albedo: [f64; 3],
    /// Global motion in pixels per frame.
    #[serde(default)]
    pub motion: [f64; 2],
    #[serde(default)]
    pub object: Option<MovingObject>,
    /// Illuminant RGB.
    #[serde(default = "white")]
    pub illuminant: [f64; 3],
    pub lux: f64,
    #[serde(default = "default_black")]
    pub black_level: u16,
    #[serde(default = "default_white")]
    pub white_level: u16,
}

fn default_cfa() -> Cfa {
    Cfa::Rggb
}
fn white() -> [f64; 3] {
    [1.0; 3]
}
fn default_black() -> u16 {
    64
}
fn default_white() -> u16 {
    1023
}

/// Capture settings for a synthetic burst.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Capture {
    pub frames: usize,
    pub exposure_time_s: f64,
    pub gain: f64,
    /// Defaults to the exposure time (shutter open the whole interval).
    #[serde(default)]
    pub frame_interval_s: Option<f64>,
    pub noise: NoiseModel<f64>,
    pub seed: u64,
    /// Recorded in the manifest for metering.
    #[serde(default)]
    pub target_sensitivity_s: Option<f64>,
    /// Emits a gyro trace of constant angular speed covering the burst.
    #[serde(default)]
    pub gyro_speed_rad_s: Option<f64>,
}

/// Scene plus capture, the `synth` command's input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub scene: SyntheticScene,
    pub capture: Capture,
}

/// Ground truth kept next to a synthetic burst.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    /// Global flow, pixels per frame.
    pub flow: [f64; 2],
    pub flow_magnitude: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_flow_magnitude: Option<f64>,
    /// Object rectangle in the first frame: x, y, width, height.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_rect: Option<[f64; 4]>,
    /// Mean clean normalized signal of the first frame.
    pub clean_mean: f64,
}

pub struct SyntheticBurst {
    pub burst: Burst,
    /// Noise-free normalized mosaic of each frame.
    pub clean: Vec<LinearImage<f64>>,
    pub truth: Truth,
}

fn channel(c: CfaColor) -> usize {
    c as usize
}

/// Renders, blurs, adds noise to and quantizes a burst. Frame z shows the
/// scene displaced by z times the motion; each frame averages 8 sub-exposure
/// positions spread over the fraction of the interval the shutter is open.
pub fn generate_burst(scene: &SyntheticScene, capture: &Capture) -> Result<SyntheticBurst> {
    if scene.width < 2 || scene.height < 2 || !scene.width.is_multiple_of(2) || !scene.height.is_multiple_of(2) {
        return Err(Error::InvalidParameter("synthetic frames need even dimensions".into()));
    }
    if capture.frames == 0 {
        return Err(Error::EmptyBurst);
    }
    if !(capture.exposure_time_s > 0.0) || !(capture.gain >= 1.0) || !(scene.lux >= 0.0) {
        return Err(Error::InvalidParameter("exposure must be positive, gain >= 1, lux >= 0".into()));
    }
    capture.noise.validate()?;
    let interval = capture.frame_interval_s.unwrap_or(capture.exposure_time_s);
    let duty = (capture.exposure_time_s / interval).min(1.0);
    let scale = scene.lux * capture.exposure_time_s * capture.gain * SIGNAL_PER_LUX_SECOND;
    let radiance: [f64; 3] = std::array::from_fn(|c| scene.albedo[c] * scene.illuminant[c] * scale);
    let tex = TextureEval::new(&scene.texture);
    let obj = scene.object.as_ref().map(|o| (o, TextureEval::new(&o.texture)));
    let noise = capture.noise.at_gain(capture.gain);
    let mut rng = ChaCha8Rng::seed_from_u64(capture.seed);
    let (w, h) = (scene.width, scene.height);

    let moving = scene.motion != [0.0, 0.0] || obj.as_ref().is_some_and(|(o, _)| o.velocity != [0.0, 0.0]);
    let taps = if moving && duty > 0.0 { 8 } else { 1 };
    let mut frames = Vec::with_capacity(capture.frames);
    let mut clean_frames = Vec::with_capacity(capture.frames);
    for z in 0..capture.frames {
        let mut clean = LinearImage::new(w, h, 1);
        for y in 0..h {
            for x in 0..w {
                let c = channel(scene.cfa.color_at(x, y));
                let mut acc = 0.0;
                for k in 0..taps {
                    let t = z as f64 + duty * ((k as f64 + 0.5) / taps as f64 - 0.5);
                    let (fx, fy) = (x as f64, y as f64);
                    let mut v = None;
                    if let Some((o, otex)) = &obj {
                        let (ox, oy) = (o.x + o.velocity[0] * t, o.y + o.velocity[1] * t);
                        if fx >= ox && fx < ox + o.width && fy >= oy && fy < oy + o.height {
                            v = Some(otex.at(fx - ox, fy - oy));
                        }
                    }
                    let r = v.unwrap_or_else(|| tex.at(fx - scene.motion[0] * t, fy - scene.motion[1] * t));
                    acc += r;
                }
                clean.set(x, y, (acc / taps as f64 * radiance[c]).min(1.0));
            }
        }
        let mut noisy = clean.clone();
        for v in noisy.data.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v = (*v + noise.sigma(*v) * n).clamp(0.0, 1.0);
        }
        let black = [scene.black_level; 4];
        frames.push(RawFrame {
            width: w,
            height: h,
            cfa: scene.cfa,
            data: denormalize(&noisy, black, scene.white_level),
            black_level: black,
            white_level: scene.white_level,
            exposure_time: capture.exposure_time_s,
            gain: capture.gain,
            timestamp: z as f64 * interval,
        });
        clean_frames.push(clean);
    }
    let mut burst = Burst::from_frames(frames, capture.noise)?;
    burst.manifest.frame_interval_s = Some(interval);
    burst.manifest.target_sensitivity_s = capture.target_sensitivity_s;
    if let Some(speed) = capture.gyro_speed_rad_s {
        let end = (capture.frames.max(1) - 1) as f64 * interval;
        let samples = (0..=200)
            .map(|i| {
                let t = end - 2.0 + 2.0 * i as f64 / 200.0;
                GyroSample { t, wx: speed, wy: 0.0, wz: 0.0 }
            })
            .collect();
        burst.manifest.gyro = Some(GyroTrace::new(samples)?);
        burst.manifest.shutter_time_s = Some(end);
    }
    let truth = Truth {
        flow: scene.motion,
        flow_magnitude: scene.motion[0].hypot(scene.motion[1]),
        object_flow_magnitude: scene.object.as_ref().map(|o| o.velocity[0].hypot(o.velocity[1])),
        object_rect: scene.object.as_ref().map(|o| [o.x, o.y, o.width, o.height]),
        clean_mean: clean_frames[0].mean(),
    };
    Ok(SyntheticBurst {
        burst,
        clean: clean_frames,
        truth,
    })
}

/// The on-disk manifest for a burst whose frames sit next to it.
pub fn manifest_file(burst: &Burst) -> ManifestFile {
    let m = &burst.manifest;
    ManifestFile {
        cfa: m.cfa,
        black_level: BlackLevelSpec::PerPlane(m.black_level),
        white_level: m.white_level,
        noise: m.noise,
        frames: m
            .frames
            .iter()
            .map(|e| FrameEntry {
                path: e.path.file_name().map(Into::into).unwrap_or_else(|| e.path.clone()),
                ..e.clone()
            })
            .collect(),
        gyro: m.gyro.as_ref().map(|g| g.samples().to_vec()),
        weight_map: None,
        frame_interval_s: m.frame_interval_s,
        shutter_time_s: m.shutter_time_s,
        target_sensitivity_s: m.target_sensitivity_s,
    }
}

/// Writes frames, `manifest.json`, `truth.json` and the clean first frame
/// (`clean.pgm`) into `dir`.
pub fn write_synthetic(dir: &Path, synth: &SyntheticBurst) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = manifest_file(&synth.burst);
    for (entry, frame) in manifest.frames.iter().zip(&synth.burst.frames) {
        write_frame(&dir.join(&entry.path), frame)?;
    }
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_json(&dir.join("truth.json"), &synth.truth)?;
    let f0 = &synth.burst.frames[0];
    let clean = denormalize(&synth.clean[0], f0.black_level, f0.white_level);
    crate::pnm::write_gray16(&dir.join("clean.pgm"), f0.width, f0.height, &clean)
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Numeric(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Settings for the synthetic white-balance dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AwbSynthParams {
    pub width: usize,
    pub height: usize,
    /// Fraction of scenes whose content lacks one colour channel.
    pub tinted_fraction: f64,
    /// Log-normal spread of the annotated illuminant in a missing channel.
    pub annotation_sigma: f64,
    /// Additive noise on thumbnail values.
    pub noise_sigma: f64,
}

impl Default for AwbSynthParams {
    fn default() -> Self {
        AwbSynthParams {
            width: 64,
            height: 48,
            tinted_fraction: 0.3,
            annotation_sigma: 0.6,
            noise_sigma: 0.002,
        }
    }
}

/// Illuminant on a straight cool-to-warm line in log-UV: t = 0 is bluish
/// shade, t = 0.3 neutral, t = 1 sodium-like amber.
pub fn locus_illuminant(t: f64) -> [f64; 3] {
    crate::awb::rgb_from_uv([1.2 * (0.3 - t), -1.5 * (0.3 - t)])
}

/// Lux at which [`awb_example`] centres the locus parameter on `t`.
pub fn locus_lux(t: f64) -> f64 {
    10f64.powf(3.3 - 3.8 * t)
}

/// Surface colours of a standard 24-patch colour chart, 8-bit sRGB.
const CHART_SRGB: [[u8; 3]; 24] = [
    [115, 82, 68],
    [194, 150, 130],
    [98, 122, 157],
    [87, 108, 67],
    [133, 128, 177],
    [103, 189, 170],
    [214, 126, 44],
    [80, 91, 166],
    [193, 90, 99],
    [94, 60, 108],
    [157, 188, 64],
    [224, 163, 46],
    [56, 61, 150],
    [70, 148, 73],
    [175, 54, 60],
    [231, 199, 31],
    [187, 86, 149],
    [8, 133, 161],
    [243, 243, 242],
    [200, 200, 200],
    [160, 160, 160],
    [122, 122, 121],
    [85, 85, 85],
    [52, 52, 52],
];

/// One labelled thumbnail: rectangles of colour-chart surfaces (with small
/// per-channel jitter) lit by an illuminant whose warmth grows as the scene
/// gets darker.
pub fn awb_example(params: &AwbSynthParams, rng: &mut ChaCha8Rng) -> crate::awb::AwbExample {
    let lux = 10f64.powf(rng.random_range(-0.5..3.3));
    let dark = ((3.3 - lux.log10()) / 3.8).clamp(0.0, 1.0);
    let t = (dark + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0);
    let mut light = locus_illuminant(t);
    let off: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
    light[0] *= (0.04 * off[0]).exp();
    light[2] *= (0.04 * off[1]).exp();
    let tinted = lux < 20.0 && rng.random_bool((params.tinted_fraction * 2.0).min(1.0));
    let missing = if rng.random_bool(0.5) { 2 } else { 0 };
    let mut ex = awb_scene(params, light, lux, tinted.then_some(missing), rng);
    if tinted {
        let n: f64 = rng.sample(StandardNormal);
        ex.illuminant[missing] *= (params.annotation_sigma * n).exp();
    }
    ex
}

/// Random chart-surface layout lit by `light` at `lux`, annotated with the
/// exact illuminant. `suppressed` scales one reflectance channel to 2%.
pub fn awb_scene(
    params: &AwbSynthParams,
    light: [f64; 3],
    lux: f64,
    suppressed: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> crate::awb::AwbExample {
    let (w, h) = (params.width, params.height);
    let surface = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        let patch = CHART_SRGB[rng.random_range(0..CHART_SRGB.len())];
        let shade: f64 = rng.random_range(0.5..1.0);
        std::array::from_fn(|c| {
            let jitter = (0.05 * rng.sample::<f64, _>(StandardNormal)).exp();
            (crate::tonemap::srgb_decode(patch[c] as f64 / 255.0) * shade * jitter).clamp(0.005, 0.95)
        })
    };
    let mut refl = LinearImage::new(w, h, 3);
    let bg = surface(rng);
    for p in refl.data.chunks_exact_mut(3) {
        p.copy_from_slice(&bg);
    }
    for _ in 0..rng.random_range(8..20) {
        let c = surface(rng);
        let (rw, rh) = (rng.random_range(4..w / 2), rng.random_range(4..h / 2));
        let (x0, y0) = (rng.random_range(0..w - rw), rng.random_range(0..h - rh));
        for y in y0..y0 + rh {
            let row = &mut refl.data[3 * (y * w + x0)..3 * (y * w + x0 + rw)];
            for p in row.chunks_exact_mut(3) {
                p.copy_from_slice(&c);
            }
        }
    }
    if let Some(c) = suppressed {
        for p in refl.data.chunks_exact_mut(3) {
            p[c] *= 0.02;
        }
    }
    let mut mu_t = [0.0; 3];
    for p in refl.data.chunks_exact(3) {
        for c in 0..3 {
            mu_t[c] += p[c] / (w * h) as f64;
        }
    }
    let lit_mean: f64 = (0..3).map(|c| mu_t[c] * light[c]).sum::<f64>() / 3.0;
    let scale = 0.2 / lit_mean;
    let mut thumbnail = LinearImage::new(w, h, 3);
    for (o, r) in thumbnail.data.chunks_exact_mut(3).zip(refl.data.chunks_exact(3)) {
        for c in 0..3 {
            let n: f64 = rng.sample(StandardNormal);
            o[c] = (r[c] * light[c] * scale + params.noise_sigma * n).clamp(0.0, 1.0);
        }
    }
    let exposure = scale / (lux * SIGNAL_PER_LUX_SECOND);
    let exposure_time = exposure.min(1.0 / 15.0);
    let gain = (exposure / exposure_time).max(1.0);
    crate::awb::AwbExample {
        thumbnail: crate::awb::median3x3(&thumbnail),
        exposure_time,
        gain,
        iso_ratio: 1.0,
        face: None,
        illuminant: light,
        mu_t,
    }
}

/// `n` seeded examples; see [`awb_example`].
pub fn awb_dataset(n: usize, seed: u64, params: &AwbSynthParams) -> Vec<crate::awb::AwbExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| awb_example(params, &mut rng)).collect()
}

/// Empirical distribution of the minimum of `k` mixture draws.
pub struct EmpiricalMin {
    pub sorted: Vec<f64>,
}

impl EmpiricalMin {
    /// Nearest-rank quantile.
    pub fn quantile(&self, p: f64) -> f64 {
        let n = self.sorted.len();
        let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
        self.sorted[rank - 1]
    }

    pub fn cdf(&self, v: f64) -> f64 {
        self.sorted.partition_point(|&s| s <= v) as f64 / self.sorted.len() as f64
    }
}

/// Monte Carlo distribution of min over `k` i.i.d. draws from `gmm`.
pub fn mc_min_motion(gmm: &Gmm<f64>, k: usize, trials: usize, seed: u64) -> EmpiricalMin {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sorted: Vec<f64> = (0..trials)
        .map(|_| {
            (0..k.max(1))
                .map(|_| {
                    let u: f64 = rng.random();
                    let z: f64 = StandardNormal.sample(&mut rng);
                    gmm.sample_with(u, z)
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    sorted.sort_by(f64::total_cmp);
    EmpiricalMin { sorted }
}

/// Plain per-pixel temporal mean of already aligned frames.
pub fn average_merge_oracle<T: Real>(frames: &[LinearImage<T>]) -> Result<LinearImage<T>> {
    let first = frames.first().ok_or(Error::EmptyBurst)?;
    if frames.iter().any(|f| !f.same_shape(first)) {
        return Err(Error::SizeMismatch("frames differ in shape".into()));
    }
    let n = T::from_usize_lossy(frames.len());
    let mut out = first.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        let s: T = frames.iter().map(|f| f.data[i]).sum();
        *v = s / n;
    }
    Ok(out)
}

/// Positive, heavy-tailed motion magnitudes: a log-domain AR(1) walk with
/// occasional Pareto-distributed bursts (hand shake, subject motion).
pub fn motion_sequence(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: f64 = rng.random_range(-1.0..2.5);
    let step = Normal::new(0.0, 0.35).expect("valid normal");
    let spike = Pareto::new(1.0, 1.3).expect("valid pareto");
    let mut ar = 0.0;
    (0..len)
        .map(|_| {
            ar = 0.8 * ar + step.sample(&mut rng);
            let mut v = (base + ar).exp2();
            if rng.random::<f64>() < 0.2 {
                v *= spike.sample(&mut rng) * 2.0;
            }
            v
        })
        .collect()
}
