//! Finishing: demosaic, white balance, synthetic exposure fusion and the
//! night-scene tone adjustments, ending in 8-bit sRGB.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::awb::IlluminantEstimate;
use crate::error::{Error, Result};
use crate::raw_model::{Cfa, LinearImage};
use crate::scalar::Real;

/// Heuristic switches, for ablations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToneFlags {
    pub shadow_gain: bool,
    pub highlight_gain: bool,
    pub saturation: bool,
    pub vignette: bool,
    pub black_point: bool,
}

impl Default for ToneFlags {
    fn default() -> Self {
        ToneFlags {
            shadow_gain: true,
            highlight_gain: true,
            saturation: true,
            vignette: true,
            black_point: true,
        }
    }
}

impl ToneFlags {
    pub fn none() -> Self {
        ToneFlags {
            shadow_gain: false,
            highlight_gain: false,
            saturation: false,
            vignette: false,
            black_point: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToneParams {
    /// Illuminance at which the shadow boost is strongest, lux.
    pub lux_min: f64,
    /// Illuminance above which no boost applies, lux.
    pub lux_max: f64,
    pub shadow_gain_max: f64,
    pub highlight_fraction: f64,
    pub saturation_max: f64,
    pub vignette_onset_lux: f64,
    /// Largest fractional darkening at the image corner.
    pub vignette_strength: f64,
    /// Overall gain at `lux_max` and at `lux_min`, interpolated in log lux.
    pub base_gain_min: f64,
    pub base_gain_max: f64,
    pub fusion_mean: f64,
    pub fusion_sigma: f64,
    /// Blend towards a smoothstep S-curve, 0 for a linear curve.
    pub contrast: f64,
    /// Luma percentile pinned to black in dark scenes.
    pub black_percentile: f64,
    /// Lux per unit of normalized signal per second of gained exposure.
    pub ev_calibration: f64,
    pub flags: ToneFlags,
}

impl Default for ToneParams {
    fn default() -> Self {
        ToneParams {
            lux_min: 0.1,
            lux_max: 200.0,
            shadow_gain_max: 2.2,
            highlight_fraction: 0.2,
            saturation_max: 0.2,
            vignette_onset_lux: 5.0,
            vignette_strength: 0.3,
            base_gain_min: 1.0,
            base_gain_max: 4.0,
            fusion_mean: 0.5,
            fusion_sigma: 0.2,
            contrast: 0.25,
            black_percentile: 0.5,
            ev_calibration: 1.0 / crate::synth_oracle::SIGNAL_PER_LUX_SECOND,
            flags: ToneFlags::default(),
        }
    }
}

impl ToneParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lux_min > 0.0
            && self.lux_max > self.lux_min
            && self.shadow_gain_max >= 1.0
            && self.highlight_fraction >= 0.0
            && self.saturation_max >= 0.0
            && (0.0..=1.0).contains(&self.vignette_strength)
            && self.vignette_onset_lux > self.lux_min
            && self.base_gain_min > 0.0
            && self.base_gain_max >= self.base_gain_min
            && self.fusion_sigma > 0.0
            && (0.0..=1.0).contains(&self.contrast)
            && (0.0..100.0).contains(&self.black_percentile)
            && self.ev_calibration > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter("invalid tone parameters".into()))
        }
    }

    /// 0 at or above `lux_max`, 1 at or below `lux_min`, linear in log lux.
    pub fn darkness(&self, ev: f64) -> f64 {
        let t = (ev.ln() - self.lux_min.ln()) / (self.lux_max.ln() - self.lux_min.ln());
        1.0 - t.clamp(0.0, 1.0)
    }

    pub fn base_gain(&self, ev: f64) -> f64 {
        self.base_gain_min * (self.base_gain_max / self.base_gain_min).powf(self.darkness(ev))
    }

    pub fn saturation_boost(&self, ev: f64) -> f64 {
        1.0 + self.saturation_max * self.darkness(ev)
    }

    /// 0 at the onset, 1 at `lux_min`, linear in log lux.
    pub fn vignette_ramp(&self, ev: f64) -> f64 {
        ((self.vignette_onset_lux.ln() - ev.ln()) / (self.vignette_onset_lux.ln() - self.lux_min.ln())).clamp(0.0, 1.0)
    }
}

/// Scene illuminance and normalized dynamic range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneStats {
    pub ev_lux: f64,
    pub dynamic_range: f64,
}

impl SceneStats {
    pub fn new(ev_lux: f64, dynamic_range: f64) -> Result<Self> {
        if !(ev_lux > 0.0) || !(0.0..=1.0).contains(&dynamic_range) {
            return Err(Error::InvalidParameter("scene stats need E_v > 0 and D in [0, 1]".into()));
        }
        Ok(SceneStats { ev_lux, dynamic_range })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: SceneStats = serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        SceneStats::new(s.ev_lux, s.dynamic_range)
    }
}

/// A_s = max^(1 - clamp((ln E_v - ln lux_min) / (ln lux_max - ln lux_min))).
pub fn shadow_gain(ev: f64, params: &ToneParams) -> f64 {
    params.shadow_gain_max.powf(params.darkness(ev))
}

/// A_h = 1 + fraction (A_s - 1)(1 - D).
pub fn highlight_gain(a_s: f64, d: f64, params: &ToneParams) -> f64 {
    1.0 + params.highlight_fraction * (a_s - 1.0) * (1.0 - d)
}

/// Rec. 709 luma weights.
pub const LUMA: [f64; 3] = [0.2126, 0.7152, 0.0722];

#[inline]
pub fn luma(p: [f64; 3]) -> f64 {
    LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]
}

fn wb_scale(est: &IlluminantEstimate) -> Result<[f64; 3]> {
    if est.gains.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
        return Err(Error::InvalidParameter("white-balance gains must be positive".into()));
    }
    Ok(est.gains.map(|g| g / est.gains[1]))
}

/// E_v from metadata; D from the luma spread of the white-balanced,
/// base-gained 2x2 quads.
pub fn scene_stats<T: Real>(
    mosaic: &LinearImage<T>,
    cfa: Cfa,
    illuminant: &IlluminantEstimate,
    exposure_time: f64,
    gain: f64,
    params: &ToneParams,
) -> Result<SceneStats> {
    if !(exposure_time * gain > 0.0) {
        return Err(Error::InvalidParameter("exposure must be positive".into()));
    }
    let wb = wb_scale(illuminant)?;
    let mean = mosaic.mean().as_f64().max(1e-9);
    let ev = params.ev_calibration * mean / (exposure_time * gain);
    let base = params.base_gain(ev);
    let mut lumas = Vec::with_capacity(mosaic.width * mosaic.height / 4);
    for qy in 0..mosaic.height / 2 {
        for qx in 0..mosaic.width / 2 {
            let mut rgb = [0.0; 3];
            let mut n = [0.0; 3];
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let (x, y) = (2 * qx + dx, 2 * qy + dy);
                let c = cfa.color_at(x, y) as usize;
                rgb[c] += mosaic.at(x, y).as_f64();
                n[c] += 1.0;
            }
            let p = std::array::from_fn(|c| (rgb[c] / n[c] * wb[c] * base).clamp(0.0, 1.0));
            lumas.push(luma(p));
        }
    }
    if lumas.is_empty() {
        return Err(Error::ImageTooSmall {
            width: mosaic.width,
            height: mosaic.height,
            levels: 1,
        });
    }
    let d = (crate::awb::percentile(&lumas, 99.5) - crate::awb::percentile(&lumas, 1.0)).clamp(0.0, 1.0);
    SceneStats::new(ev, d)
}

/// Bilinear demosaic: missing colours average the same-colour sites among
/// the in-bounds 3x3 neighbours.
pub fn demosaic<T: Real>(mosaic: &LinearImage<T>, cfa: Cfa) -> Result<LinearImage<f64>> {
    if mosaic.channels != 1 {
        return Err(Error::InvalidParameter("demosaic expects a single-channel mosaic".into()));
    }
    let (w, h) = (mosaic.width, mosaic.height);
    if w < 2 || h < 2 {
        return Err(Error::ImageTooSmall { width: w, height: h, levels: 1 });
    }
    let mut data = vec![0.0; w * h * 3];
    data.par_chunks_mut(w * 3).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let own = cfa.color_at(x, y) as usize;
            let mut sum = [0.0; 3];
            let mut n = [0u32; 3];
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (sx, sy) = (x as isize + dx, y as isize + dy);
                    if sx < 0 || sy < 0 || sx >= w as isize || sy >= h as isize {
                        continue;
                    }
                    let c = cfa.color_at(sx as usize, sy as usize) as usize;
                    sum[c] += mosaic.at(sx as usize, sy as usize).as_f64();
                    n[c] += 1;
                }
            }
            for c in 0..3 {
                row[3 * x + c] = if c == own {
                    mosaic.at(x, y).as_f64()
                } else {
                    sum[c] / n[c].max(1) as f64
                };
            }
        }
    });
    LinearImage::from_vec(w, h, 3, data)
}

/// Gaussian well-exposedness of a luma value.
#[inline]
pub fn well_exposedness(y: f64, params: &ToneParams) -> f64 {
    let d = y.clamp(0.0, 1.0) - params.fusion_mean;
    (-d * d / (2.0 * params.fusion_sigma * params.fusion_sigma)).exp()
}

/// Per-pixel blend of two synthetic exposures weighted by well-exposedness.
#[inline]
pub fn fuse(shadows: [f64; 3], highlights: [f64; 3], params: &ToneParams) -> [f64; 3] {
    let ws = well_exposedness(luma(shadows), params);
    let wh = well_exposedness(luma(highlights), params);
    let total = ws + wh;
    if total <= 0.0 {
        return std::array::from_fn(|c| 0.5 * (shadows[c] + highlights[c]));
    }
    std::array::from_fn(|c| (ws * shadows[c] + wh * highlights[c]) / total)
}

/// Scales chroma about the luma axis by `s`, reduced where a channel
/// would otherwise go negative.
#[inline]
pub fn boost_saturation(p: [f64; 3], s: f64) -> [f64; 3] {
    let y = luma(p);
    let lo = p[0].min(p[1]).min(p[2]);
    let mut s = s;
    if lo < y && y > 0.0 {
        s = s.min(y / (y - lo));
    }
    std::array::from_fn(|c| y + s * (p[c] - y))
}

/// Multiplicative vignette at normalized radius `rho` (0 centre, 1 corner):
/// 1 - strength * ramp * (1 - cos^4 theta), with tan theta = rho.
#[inline]
pub fn vignette_gain(rho: f64, strength: f64, ramp: f64) -> f64 {
    let c2 = 1.0 / (1.0 + rho * rho);
    1.0 - strength * ramp * (1.0 - c2 * c2)
}

/// Monotone global curve on luma: optional black-point shift, clamp, then a
/// blend between identity and smoothstep.
#[inline]
pub fn tone_curve(y: f64, contrast: f64, black: f64) -> f64 {
    let t = if black > 0.0 && black < 1.0 {
        (y - black) / (1.0 - black)
    } else {
        y
    };
    let t = t.clamp(0.0, 1.0);
    (1.0 - contrast) * t + contrast * t * t * (3.0 - 2.0 * t)
}

/// IEC 61966-2-1 encoding of a linear value in [0, 1].
#[inline]
pub fn srgb_encode(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.0031308 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

pub fn srgb_decode(e: f64) -> f64 {
    if e <= 0.04045 {
        e / 12.92
    } else {
        ((e + 0.055) / 1.055).powf(2.4)
    }
}

/// 8-bit interleaved sRGB.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SrgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl SrgbImage {
    pub fn at(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            enc.set_source_srgb(png::SrgbRenderingIntent::Perceptual);
            let mut writer = enc.write_header().map_err(|e| Error::Numeric(format!("png: {e}")))?;
            writer
                .write_image_data(&self.data)
                .map_err(|e| Error::Numeric(format!("png: {e}")))?;
        }
        Ok(out)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Gains and ramps resolved for one scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToneDecisions {
    pub base_gain: f64,
    pub shadow_gain: f64,
    pub highlight_gain: f64,
    pub saturation: f64,
    pub vignette_ramp: f64,
    /// Fused luma mapped to black, 0 if not applied.
    pub black_point: f64,
}

pub fn decisions(stats: &SceneStats, params: &ToneParams) -> ToneDecisions {
    let f = &params.flags;
    let a_s = if f.shadow_gain { shadow_gain(stats.ev_lux, params) } else { 1.0 };
    let a_h = if f.highlight_gain {
        highlight_gain(a_s, stats.dynamic_range, params)
    } else {
        1.0
    };
    ToneDecisions {
        base_gain: params.base_gain(stats.ev_lux),
        shadow_gain: a_s,
        highlight_gain: a_h,
        saturation: if f.saturation { params.saturation_boost(stats.ev_lux) } else { 1.0 },
        vignette_ramp: if f.vignette { params.vignette_ramp(stats.ev_lux) } else { 0.0 },
        black_point: 0.0,
    }
}

/// Full finishing chain. Returns the image and the resolved decisions.
pub fn finish<T: Real>(
    mosaic: &LinearImage<T>,
    cfa: Cfa,
    illuminant: &IlluminantEstimate,
    stats: &SceneStats,
    params: &ToneParams,
) -> Result<(SrgbImage, ToneDecisions)> {
    params.validate()?;
    let wb = wb_scale(illuminant)?;
    let mut dec = decisions(stats, params);
    let mut rgb = demosaic(mosaic, cfa)?;
    let (w, h) = (rgb.width, rgb.height);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let half_diag = (cx * cx + cy * cy).sqrt().max(1e-9);
    let d = dec;
    rgb.data.par_chunks_mut(w * 3).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let px = &mut row[3 * x..3 * x + 3];
            let base: [f64; 3] = std::array::from_fn(|c| px[c] * wb[c] * d.base_gain);
            let s = base.map(|v| v * d.shadow_gain);
            let hl = base.map(|v| v * d.highlight_gain);
            let mut p = fuse(s, hl, params);
            if d.saturation != 1.0 {
                p = boost_saturation(p, d.saturation);
            }
            if d.vignette_ramp > 0.0 {
                let rho = ((x as f64 - cx).powi(2) + (cy - y as f64).powi(2)).sqrt() / half_diag;
                let g = vignette_gain(rho, params.vignette_strength, d.vignette_ramp);
                p = p.map(|v| v * g);
            }
            px.copy_from_slice(&p);
        }
    });
    if params.flags.black_point && stats.ev_lux < params.vignette_onset_lux {
        let lumas: Vec<f64> = rgb.data.chunks_exact(3).map(|p| luma([p[0], p[1], p[2]])).collect();
        dec.black_point = crate::awb::percentile(&lumas, params.black_percentile).clamp(0.0, 0.5);
    }
    let (contrast, black) = (params.contrast, dec.black_point);
    let mut out = vec![0u8; w * h * 3];
    out.par_chunks_mut(w * 3)
        .zip(rgb.data.par_chunks(w * 3))
        .for_each(|(o, row)| {
            for (op, p) in o.chunks_exact_mut(3).zip(row.chunks_exact(3)) {
                let y = luma([p[0], p[1], p[2]]);
                let scale = if y > 0.0 { tone_curve(y, contrast, black) / y } else { 0.0 };
                for c in 0..3 {
                    op[c] = (srgb_encode(p[c] * scale) * 255.0).round() as u8;
                }
            }
        });
    Ok((SrgbImage { width: w, height: h, data: out }, dec))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gain_endpoints() {
        let p = ToneParams::default();
        assert_eq!(shadow_gain(200.0, &p), 1.0);
        assert_eq!(shadow_gain(0.1, &p), 2.2);
        assert!((shadow_gain((0.1f64 * 200.0).sqrt(), &p) - 2.2f64.sqrt()).abs() < 1e-12);
        assert!((highlight_gain(2.2, 0.0, &p) - 1.24).abs() < 1e-12);
        assert_eq!(highlight_gain(2.2, 1.0, &p), 1.0);
        assert_eq!(highlight_gain(1.0, 0.3, &p), 1.0);
    }

    #[test]
    fn srgb_round_trip() {
        for i in 0..=100 {
            let v = i as f64 / 100.0;
            assert!((srgb_decode(srgb_encode(v)) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn demosaic_flat_field() {
        let m = LinearImage::filled(8, 6, 1, 0.3f64);
        let d = demosaic(&m, Cfa::Rggb).unwrap();
        assert!(d.data.iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn saturation_keeps_luma_and_non_negativity() {
        let p = [0.05, 0.4, 0.3];
        let q = boost_saturation(p, 1.2);
        assert!((luma(p) - luma(q)).abs() < 1e-12);
        assert!(q.iter().all(|&v| v >= -1e-15));
    }
}
