//! Pairwise Fourier-domain temporal merge with spatially varying strength,
//! then frequency-domain spatial denoising driven by how much merging each
//! tile received.
//!
//! Every CFA plane is cut into 8x8 tiles at stride 4 with a raised-cosine
//! window that sums to one across overlapping tiles. Both stages write their
//! result as `input + sum of windowed tile corrections`, so a tile whose
//! correction is exactly zero reproduces its input bit for bit.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::burst_align::{merge_origin, TileAlignment, MERGE_TILE};
use crate::error::{Error, Result};
use crate::raw_model::{LinearImage, NoiseModel};
use crate::scalar::Real;

const N: usize = MERGE_TILE;
const NN: usize = N * N;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeParams {
    /// Temporal strength c: scale on the noise variance in the merge weight.
    pub temporal_strength: f64,
    /// Mismatch scaling s.
    pub mismatch_s: f64,
    pub f_min: f64,
    /// (scene noise sigma at mid-gray, f_max) pairs, sorted by sigma.
    pub f_max_by_noise: Vec<(f64, f64)>,
    pub m_lo: f64,
    pub m_hi: f64,
    /// Strength multiplier on the post-merge variance in spatial denoising.
    pub spatial_strength: f64,
    /// Use f = 1 everywhere (the fixed-strength merge).
    pub force_f1: bool,
}

impl Default for MergeParams {
    fn default() -> Self {
        MergeParams {
            temporal_strength: 1.5,
            mismatch_s: 0.5,
            f_min: 1.0,
            f_max_by_noise: vec![(0.004, 1.0), (0.02, 4.0), (0.05, 8.0)],
            m_lo: 0.1,
            m_hi: 0.5,
            spatial_strength: 2.0,
            force_f1: false,
        }
    }
}

impl MergeParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if !(self.temporal_strength > 0.0) || !(self.mismatch_s > 0.0) {
            return bad("temporal strength and mismatch scaling must be positive");
        }
        if !(self.f_min >= 1.0) {
            return bad("f_min must be at least 1");
        }
        if self.f_max_by_noise.is_empty() {
            return bad("f_max table is empty");
        }
        if self.f_max_by_noise.windows(2).any(|w| !(w[0].0 < w[1].0)) {
            return bad("f_max table must be sorted by strictly increasing noise");
        }
        if self.f_max_by_noise.iter().any(|&(_, f)| !(f >= self.f_min)) {
            return bad("f_max entries must not be below f_min");
        }
        if !(0.0 <= self.m_lo && self.m_lo < self.m_hi && self.m_hi <= 1.0) {
            return bad("mismatch breakpoints must satisfy 0 <= m_lo < m_hi <= 1");
        }
        if !(self.spatial_strength >= 0.0) {
            return bad("spatial strength must be non-negative");
        }
        Ok(())
    }

    /// f_max at a scene noise level, linear between table entries and held at the ends.
    pub fn f_max(&self, scene_noise: f64) -> f64 {
        let t = &self.f_max_by_noise;
        if scene_noise <= t[0].0 {
            return t[0].1;
        }
        for w in t.windows(2) {
            let ((n0, f0), (n1, f1)) = (w[0], w[1]);
            if scene_noise <= n1 {
                return f0 + (f1 - f0) * (scene_noise - n0) / (n1 - n0);
            }
        }
        t[t.len() - 1].1
    }
}

/// Shrinkage of a residual against a variance scale: d² / (d² + s σ²).
#[inline]
pub fn mismatch(d: f64, s: f64, sigma2: f64) -> f64 {
    let d2 = d * d;
    if d2 == 0.0 {
        0.0
    } else {
        d2 / (d2 + s * sigma2)
    }
}

/// Strength factor: f_max up to m_lo, linear down to f_min at m_hi.
pub fn strength_factor(m: f64, scene_noise: f64, params: &MergeParams) -> f64 {
    let f_max = params.f_max(scene_noise);
    if m <= params.m_lo {
        f_max
    } else if m >= params.m_hi {
        params.f_min
    } else {
        let t = (m - params.m_lo) / (params.m_hi - params.m_lo);
        f_max + (params.f_min - f_max) * t
    }
}

/// Scene noise scalar: sigma at mid-gray.
pub fn scene_noise<T: Real>(noise: &NoiseModel<T>) -> f64 {
    noise.sigma(T::lit(0.5)).as_f64()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MismatchMap {
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub scene_noise: f64,
    /// m per frame per tile; the reference row is zero.
    pub m: Vec<Vec<f64>>,
    /// f per frame per tile.
    pub f: Vec<Vec<f64>>,
}

impl MismatchMap {
    /// Mean mismatch of each frame.
    pub fn frame_means(&self) -> Vec<f64> {
        self.m
            .iter()
            .map(|row| row.iter().sum::<f64>() / row.len().max(1) as f64)
            .collect()
    }

    pub fn max_f(&self) -> f64 {
        self.f.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Mean of the reference mosaic over each merge tile's 16x16 footprint.
fn tile_means<T: Real>(reference: &LinearImage<T>, tiles_x: usize, tiles_y: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(tiles_x * tiles_y);
    let side = 2 * N;
    for j in 0..tiles_y {
        for i in 0..tiles_x {
            let (x0, y0) = (2 * merge_origin(i), 2 * merge_origin(j));
            let mut s = 0.0;
            for y in 0..side as isize {
                for x in 0..side as isize {
                    s += reference.at_clamped(x0 + x, y0 + y).as_f64();
                }
            }
            out.push(s / (side * side) as f64);
        }
    }
    out
}

/// Mismatch and strength factor for every tile of every frame. The variance
/// scale is that of a difference of two raw samples at the tile's mean level.
pub fn mismatch_maps<T: Real>(
    reference: &LinearImage<T>,
    alignment: &TileAlignment,
    noise: &NoiseModel<T>,
    params: &MergeParams,
) -> Result<MismatchMap> {
    params.validate()?;
    let (tx, ty) = (alignment.tiles_x, alignment.tiles_y);
    let means = tile_means(reference, tx, ty);
    let sn = scene_noise(noise);
    let noise = noise.cast::<f64>();
    let mut m = Vec::with_capacity(alignment.frames.len());
    let mut f = Vec::with_capacity(alignment.frames.len());
    for fa in &alignment.frames {
        let row: Vec<f64> = fa
            .residual
            .iter()
            .zip(&means)
            .map(|(&d, &mu)| mismatch(d, params.mismatch_s, 2.0 * noise.variance(mu)))
            .collect();
        f.push(
            row.iter()
                .map(|&v| if params.force_f1 { 1.0 } else { strength_factor(v, sn, params) })
                .collect(),
        );
        m.push(row);
    }
    Ok(MismatchMap {
        tiles_x: tx,
        tiles_y: ty,
        scene_noise: sn,
        m,
        f,
    })
}

/// Merged mosaic plus per-tile merge statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedRaw<T> {
    pub mosaic: LinearImage<T>,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub frames: usize,
    /// Effective number of merged frames per tile, in [1, frames].
    pub n_eff: Vec<f64>,
    /// Mean merge weight per frame per tile; the reference row is one.
    pub mean_weight: Vec<Vec<f64>>,
}

impl<T: Real> MergedRaw<T> {
    /// N_eff map as 8-bit gray, `255 * n_eff / frames`.
    pub fn n_eff_gray8(&self) -> Vec<u8> {
        self.n_eff
            .iter()
            .map(|&n| (255.0 * n / self.frames as f64).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    /// Histogram of N_eff over `bins` equal-width bins spanning [1, frames].
    pub fn n_eff_histogram(&self, bins: usize) -> Vec<usize> {
        let mut h = vec![0; bins.max(1)];
        let span = (self.frames as f64 - 1.0).max(1e-12);
        for &n in &self.n_eff {
            let b = (((n - 1.0) / span) * h.len() as f64).floor().max(0.0) as usize;
            let last = h.len() - 1;
            h[b.min(last)] += 1;
        }
        h
    }
}

/// Raised cosine, 0.5 - 0.5 cos(2 pi (n + 0.5) / 8); w(n) + w(n + 4) = 1.
pub fn window<T: Real>() -> [T; N] {
    std::array::from_fn(|n| {
        T::lit(0.5 - 0.5 * (2.0 * std::f64::consts::PI * (n as f64 + 0.5) / N as f64).cos())
    })
}

struct Fft2<T: Real> {
    fwd: Arc<dyn Fft<T>>,
    inv: Arc<dyn Fft<T>>,
}

impl<T: Real> Fft2<T> {
    fn new() -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            fwd: planner.plan_fft_forward(N),
            inv: planner.plan_fft_inverse(N),
        }
    }

    fn run(fft: &dyn Fft<T>, buf: &mut [Complex<T>; NN], tmp: &mut [Complex<T>; NN]) {
        fft.process(buf);
        for y in 0..N {
            for x in 0..N {
                tmp[x * N + y] = buf[y * N + x];
            }
        }
        fft.process(tmp);
        for y in 0..N {
            for x in 0..N {
                buf[y * N + x] = tmp[x * N + y];
            }
        }
    }

    fn forward(&self, buf: &mut [Complex<T>; NN], tmp: &mut [Complex<T>; NN]) {
        Self::run(self.fwd.as_ref(), buf, tmp);
    }

    /// Unnormalized inverse.
    fn inverse(&self, buf: &mut [Complex<T>; NN], tmp: &mut [Complex<T>; NN]) {
        Self::run(self.inv.as_ref(), buf, tmp);
    }
}

/// Windowed tile of `plane` at plane origin (x0, y0), edge-clamped. Returns the
/// unwindowed mean alongside.
fn load_tile<T: Real>(plane: &LinearImage<T>, x0: isize, y0: isize, win: &[T; N], out: &mut [Complex<T>; NN]) -> T {
    let mut sum = T::zero();
    for y in 0..N {
        for x in 0..N {
            let v = plane.at_clamped(x0 + x as isize, y0 + y as isize);
            sum = sum + v;
            out[y * N + x] = Complex::new(v * win[x] * win[y], T::zero());
        }
    }
    sum / T::lit(NN as f64)
}

/// Sum of squared 2-D window weights: the noise power gain of a windowed tile.
fn window_power<T: Real>(win: &[T; N]) -> T {
    let s: T = win.iter().map(|&w| w * w).sum();
    s * s
}

struct TileResult<T> {
    corrections: [[T; NN]; 4],
    n_eff: f64,
    mean_weight: Vec<f64>,
}

fn overlap_add<T: Real>(
    planes: &mut [LinearImage<T>; 4],
    results: &[TileResult<T>],
    tiles_x: usize,
    sign: T,
) {
    for (t, r) in results.iter().enumerate() {
        let (x0, y0) = (merge_origin(t % tiles_x), merge_origin(t / tiles_x));
        for (c, plane) in planes.iter_mut().enumerate() {
            for y in 0..N {
                let py = y0 + y as isize;
                if py < 0 || py >= plane.height as isize {
                    continue;
                }
                for x in 0..N {
                    let px = x0 + x as isize;
                    if px < 0 || px >= plane.width as isize {
                        continue;
                    }
                    let (px, py) = (px as usize, py as usize);
                    let v = plane.at(px, py) + sign * r.corrections[c][y * N + x];
                    plane.set(px, py, v);
                }
            }
        }
    }
}

fn check_burst<T: Real>(mosaics: &[LinearImage<T>], alignment: &TileAlignment) -> Result<()> {
    if mosaics.is_empty() {
        return Err(Error::EmptyBurst);
    }
    if alignment.frames.len() != mosaics.len() || alignment.reference >= mosaics.len() {
        return Err(Error::SizeMismatch(format!(
            "alignment covers {} frames, burst has {}",
            alignment.frames.len(),
            mosaics.len()
        )));
    }
    let r = &mosaics[0];
    if !r.width.is_multiple_of(2) || !r.height.is_multiple_of(2) {
        return Err(Error::InvalidFrame("mosaic dimensions must be even".into()));
    }
    let grid = crate::burst_align::merge_grid(r.width / 2, r.height / 2);
    if grid != (alignment.tiles_x, alignment.tiles_y) {
        return Err(Error::SizeMismatch("alignment grid does not match the mosaic".into()));
    }
    if mosaics.iter().any(|m| !m.same_shape(r)) {
        return Err(Error::SizeMismatch("frames differ in size".into()));
    }
    Ok(())
}

/// Shared temporal merge. `strength(tile, frame)` is the product c * f.
fn merge_with<T: Real>(
    mosaics: &[LinearImage<T>],
    alignment: &TileAlignment,
    noise: &NoiseModel<T>,
    strength: impl Fn(usize, usize) -> T + Sync,
) -> Result<MergedRaw<T>> {
    check_burst(mosaics, alignment)?;
    let reference = alignment.reference;
    let planes: Vec<[LinearImage<T>; 4]> = mosaics.iter().map(|m| m.cfa_planes()).collect();
    let (tiles_x, tiles_y) = (alignment.tiles_x, alignment.tiles_y);
    let win = window::<T>();
    let power = window_power(&win);
    let two = T::lit(2.0);
    let inv_nn = T::lit(1.0 / NN as f64);
    let frames = mosaics.len();
    let fft = Fft2::<T>::new();

    let results: Vec<TileResult<T>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|t| {
            let (x0, y0) = (merge_origin(t % tiles_x), merge_origin(t / tiles_x));
            let zero = Complex::new(T::zero(), T::zero());
            let mut tmp = [zero; NN];
            let mut refs = [[zero; NN]; 4];
            let mut sigma_f = [T::zero(); 4];
            for c in 0..4 {
                let mean = load_tile(&planes[reference][c], x0, y0, &win, &mut refs[c]);
                fft.forward(&mut refs[c], &mut tmp);
                sigma_f[c] = two * noise.variance(mean) * power;
            }
            let mut num = [[zero; NN]; 4];
            let mut den = [T::zero(); NN];
            let mut mean_weight = vec![1.0; frames];
            let mut alt = [[zero; NN]; 4];
            for z in 0..frames {
                if z == reference {
                    continue;
                }
                let (dx, dy) = alignment.frames[z].displacement[t];
                let (ox, oy) = (x0 + (dx / 2) as isize, y0 + (dy / 2) as isize);
                for c in 0..4 {
                    load_tile(&planes[z][c], ox, oy, &win, &mut alt[c]);
                    fft.forward(&mut alt[c], &mut tmp);
                    for k in 0..NN {
                        alt[c][k] = alt[c][k] - refs[c][k];
                    }
                }
                let s = strength(t, z);
                let mut wsum = 0.0;
                for k in 0..NN {
                    let mut w = T::one();
                    for c in 0..4 {
                        let d2 = alt[c][k].norm_sqr();
                        let scaled = s * sigma_f[c];
                        let wc = scaled / (d2 + scaled);
                        w = w.min(wc);
                    }
                    den[k] = den[k] + w;
                    for c in 0..4 {
                        num[c][k] = num[c][k] + alt[c][k] * w;
                    }
                    wsum += w.as_f64();
                }
                mean_weight[z] = wsum / NN as f64;
            }
            let mut corrections = [[T::zero(); NN]; 4];
            for c in 0..4 {
                let mut buf = num[c];
                for k in 0..NN {
                    buf[k] = buf[k] / (T::one() + den[k]);
                }
                fft.inverse(&mut buf, &mut tmp);
                for k in 0..NN {
                    corrections[c][k] = buf[k].re * inv_nn;
                }
            }
            let n_eff = 1.0
                + mean_weight
                    .iter()
                    .enumerate()
                    .filter(|&(z, _)| z != reference)
                    .map(|(_, w)| w)
                    .sum::<f64>();
            TileResult {
                corrections,
                n_eff,
                mean_weight,
            }
        })
        .collect();

    let mut out = planes[reference].clone();
    overlap_add(&mut out, &results, tiles_x, T::one());
    let mut mean_weight = vec![Vec::with_capacity(results.len()); frames];
    for r in &results {
        for (z, &w) in r.mean_weight.iter().enumerate() {
            mean_weight[z].push(w);
        }
    }
    Ok(MergedRaw {
        mosaic: LinearImage::from_cfa_planes(&out),
        tiles_x,
        tiles_y,
        frames,
        n_eff: results.iter().map(|r| r.n_eff).collect(),
        mean_weight,
    })
}

/// Spatially varying temporal merge: per tile and frame the noise term is
/// scaled by c * f_tz.
pub fn merge_fourier<T: Real>(
    mosaics: &[LinearImage<T>],
    alignment: &TileAlignment,
    mismatch: &MismatchMap,
    noise: &NoiseModel<T>,
    params: &MergeParams,
) -> Result<MergedRaw<T>> {
    params.validate()?;
    if mismatch.f.len() != mosaics.len() || (mismatch.tiles_x, mismatch.tiles_y) != (alignment.tiles_x, alignment.tiles_y) {
        return Err(Error::SizeMismatch("mismatch map does not match the alignment".into()));
    }
    let c = T::lit(params.temporal_strength);
    merge_with(mosaics, alignment, noise, |t, z| c * T::lit(mismatch.f[z][t]))
}

/// Fixed-strength merge: the noise term is scaled by c alone.
pub fn merge_baseline<T: Real>(
    mosaics: &[LinearImage<T>],
    alignment: &TileAlignment,
    noise: &NoiseModel<T>,
    params: &MergeParams,
) -> Result<MergedRaw<T>> {
    params.validate()?;
    let c = T::lit(params.temporal_strength);
    merge_with(mosaics, alignment, noise, |_, _| c)
}

/// Wiener-style shrinkage of each tile's non-DC coefficients against the
/// post-merge variance sigma² / N_eff.
pub fn spatial_denoise<T: Real>(merged: &MergedRaw<T>, noise: &NoiseModel<T>, params: &MergeParams) -> Result<MergedRaw<T>> {
    params.validate()?;
    if merged.n_eff.len() != merged.tiles_x * merged.tiles_y {
        return Err(Error::SizeMismatch("N_eff map does not match the tile grid".into()));
    }
    let planes = merged.mosaic.cfa_planes();
    let tiles_x = merged.tiles_x;
    let win = window::<T>();
    let power = window_power(&win);
    let k = T::lit(params.spatial_strength);
    let inv_nn = T::lit(1.0 / NN as f64);
    let fft = Fft2::<T>::new();
    let results: Vec<TileResult<T>> = (0..merged.n_eff.len())
        .into_par_iter()
        .map(|t| {
            let (x0, y0) = (merge_origin(t % tiles_x), merge_origin(t / tiles_x));
            let zero = Complex::new(T::zero(), T::zero());
            let mut tmp = [zero; NN];
            let mut corrections = [[T::zero(); NN]; 4];
            let n_eff = T::lit(merged.n_eff[t].max(1.0));
            for c in 0..4 {
                let mut buf = [zero; NN];
                let mean = load_tile(&planes[c], x0, y0, &win, &mut buf);
                fft.forward(&mut buf, &mut tmp);
                let v = k * noise.variance(mean) / n_eff * power;
                buf[0] = zero;
                for b in buf.iter_mut().skip(1) {
                    let p = b.norm_sqr();
                    *b = *b * (v / (p + v));
                }
                fft.inverse(&mut buf, &mut tmp);
                for i in 0..NN {
                    corrections[c][i] = buf[i].re * inv_nn;
                }
            }
            TileResult {
                corrections,
                n_eff: merged.n_eff[t],
                mean_weight: Vec::new(),
            }
        })
        .collect();
    let mut out = planes;
    overlap_add(&mut out, &results, tiles_x, -T::one());
    Ok(MergedRaw {
        mosaic: LinearImage::from_cfa_planes(&out),
        ..merged.clone()
    })
}
