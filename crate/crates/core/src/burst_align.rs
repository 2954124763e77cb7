//! Reference selection and coarse-to-fine tile alignment.
//!
//! Alignment runs on the half-resolution green plane (the mean of the two
//! green sites of each CFA quad), so a displacement of one plane pixel is two
//! mosaic pixels and always preserves the CFA phase.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raw_model::{gaussian_downsample, Cfa, LinearImage, NoiseModel};
use crate::scalar::Real;

/// Merge tile edge in CFA-plane pixels (16 mosaic pixels).
pub const MERGE_TILE: usize = 8;
/// Merge tile stride in CFA-plane pixels: half-tile overlap.
pub const MERGE_STRIDE: usize = MERGE_TILE / 2;

/// Merge-tile grid covering a `plane_w` x `plane_h` CFA plane. Tile `i` spans
/// plane pixels `[4i - 4, 4i + 4)`, so every pixel lies under exactly two
/// tiles per axis.
pub fn merge_grid(plane_w: usize, plane_h: usize) -> (usize, usize) {
    (
        (plane_w.max(1) - 1) / MERGE_STRIDE + 2,
        (plane_h.max(1) - 1) / MERGE_STRIDE + 2,
    )
}

/// Plane-pixel origin of merge tile `i` along one axis.
#[inline]
pub fn merge_origin(i: usize) -> isize {
    (i * MERGE_STRIDE) as isize - MERGE_STRIDE as isize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignParams {
    pub levels: usize,
    /// Search radius per level, in pixels of that level.
    pub search_radius: i32,
    /// Reference SNR at or above which 16-pixel tiles are used.
    pub snr_high: f64,
    /// Reference SNR at or above which 32-pixel tiles are used; below, 64.
    pub snr_low: f64,
    /// Forces the alignment tile size in mosaic pixels.
    pub tile_size: Option<usize>,
    /// Side of the square blocks the tile difference is averaged over before
    /// the residual's absolute value is taken (1, 2, 4 or 8).
    pub residual_pool: usize,
}

impl Default for AlignParams {
    fn default() -> Self {
        AlignParams {
            levels: 4,
            search_radius: 4,
            snr_high: 8.0,
            snr_low: 3.0,
            tile_size: None,
            residual_pool: 2,
        }
    }
}

impl AlignParams {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.search_radius < 0 {
            return Err(Error::InvalidParameter("alignment needs levels >= 1 and radius >= 0".into()));
        }
        if !matches!(self.residual_pool, 1 | 2 | 4 | 8) {
            return Err(Error::InvalidParameter("residual pool must be 1, 2, 4 or 8".into()));
        }
        if let Some(t) = self.tile_size {
            if t < 4 || t % 4 != 0 {
                return Err(Error::InvalidParameter(format!("alignment tile size {t} must be a multiple of 4")));
            }
        }
        Ok(())
    }

    /// Alignment tile size in mosaic pixels for a reference SNR.
    pub fn tile_for_snr(&self, snr: f64) -> usize {
        if let Some(t) = self.tile_size {
            t
        } else if snr >= self.snr_high {
            16
        } else if snr >= self.snr_low {
            32
        } else {
            64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceChoice {
    pub index: usize,
    pub sharpness: Vec<f64>,
}

/// Mean squared central-difference gradient of an image's interior.
pub fn sharpness<T: Real>(img: &LinearImage<T>) -> f64 {
    let (w, h) = (img.width, img.height);
    if w < 3 || h < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = (img.at(x + 1, y) - img.at(x - 1, y)).as_f64() * 0.5;
            let gy = (img.at(x, y + 1) - img.at(x, y - 1)).as_f64() * 0.5;
            acc += gx * gx + gy * gy;
        }
    }
    acc / ((w - 2) * (h - 2)) as f64
}

/// Picks the sharpest of the first `pool_k` frames; ties go to the earliest.
pub fn select_reference<T: Real>(mosaics: &[LinearImage<T>], cfa: Cfa, pool_k: usize) -> Result<ReferenceChoice> {
    if mosaics.is_empty() {
        return Err(Error::EmptyBurst);
    }
    let pool = pool_k.clamp(1, mosaics.len());
    let scores: Vec<f64> = mosaics[..pool]
        .par_iter()
        .map(|m| sharpness(&gaussian_downsample(&m.green_quad(cfa))))
        .collect();
    let mut index = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[index] {
            index = i;
        }
    }
    Ok(ReferenceChoice {
        index,
        sharpness: scores,
    })
}

/// Displacements and residuals of one frame at merge-tile granularity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameAlignment {
    /// Mosaic-pixel displacement per merge tile: alt(x + d) matches ref(x).
    pub displacement: Vec<(i32, i32)>,
    /// Mean-removed mean absolute difference per merge tile, normalized signal.
    pub residual: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileAlignment {
    pub reference: usize,
    /// Alignment tile size in mosaic pixels.
    pub tile_size: usize,
    pub reference_snr: f64,
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// One entry per frame; the reference's is all zero.
    pub frames: Vec<FrameAlignment>,
}

impl TileAlignment {
    /// CSV with one row per frame and merge tile.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,tile_x,tile_y,dx,dy,residual\n");
        for (z, f) in self.frames.iter().enumerate() {
            for ty in 0..self.tiles_y {
                for tx in 0..self.tiles_x {
                    let i = ty * self.tiles_x + tx;
                    let (dx, dy) = f.displacement[i];
                    let _ = writeln!(out, "{z},{tx},{ty},{dx},{dy},{:.9}", f.residual[i]);
                }
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn patch<T: Real>(img: &LinearImage<T>, x0: isize, y0: isize, size: usize, buf: &mut Vec<f64>) -> f64 {
    buf.clear();
    let mut sum = 0.0;
    for y in 0..size as isize {
        for x in 0..size as isize {
            let v = img.at_clamped(x0 + x, y0 + y).as_f64();
            sum += v;
            buf.push(v);
        }
    }
    sum / (size * size) as f64
}

fn mean_removed_l1(a: &[f64], ma: f64, b: &[f64], mb: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - ma) - (y - mb)).abs()).sum()
}

struct LevelGrid {
    tile: usize,
    nx: usize,
    ny: usize,
}

impl LevelGrid {
    fn new(w: usize, h: usize, tile: usize) -> Self {
        LevelGrid {
            tile,
            nx: w.div_ceil(tile).max(1),
            ny: h.div_ceil(tile).max(1),
        }
    }

    fn index_at(&self, px: f64, py: f64) -> usize {
        let tx = ((px / self.tile as f64).floor().max(0.0) as usize).min(self.nx - 1);
        let ty = ((py / self.tile as f64).floor().max(0.0) as usize).min(self.ny - 1);
        ty * self.nx + tx
    }
}

fn match_level<T: Real>(
    reference: &LinearImage<T>,
    alt: &LinearImage<T>,
    grid: &LevelGrid,
    seeds: &[Vec<(i32, i32)>],
    radius: i32,
) -> Vec<(i32, i32)> {
    let t = grid.tile;
    let mut out = Vec::with_capacity(grid.nx * grid.ny);
    let mut rbuf = Vec::with_capacity(t * t);
    let mut abuf = Vec::with_capacity(t * t);
    for ty in 0..grid.ny {
        for tx in 0..grid.nx {
            let (x0, y0) = ((tx * t) as isize, (ty * t) as isize);
            let mr = patch(reference, x0, y0, t, &mut rbuf);
            let seed = best_candidate(&seeds[ty * grid.nx + tx], |d| {
                let ma = patch(alt, x0 + d.0 as isize, y0 + d.1 as isize, t, &mut abuf);
                mean_removed_l1(&rbuf, mr, &abuf, ma)
            });
            let mut best = (f64::INFINITY, i32::MAX, seed);
            for dy in -radius..=radius {
                for dx in -radius..=radius {
                    let d = (seed.0 + dx, seed.1 + dy);
                    let ma = patch(alt, x0 + d.0 as isize, y0 + d.1 as isize, t, &mut abuf);
                    let cost = mean_removed_l1(&rbuf, mr, &abuf, ma);
                    let dist = dx.abs() + dy.abs();
                    if cost < best.0 || (cost == best.0 && dist < best.1) {
                        best = (cost, dist, d);
                    }
                }
            }
            out.push(best.2);
        }
    }
    out
}

/// Lowest-cost candidate; the first wins ties.
fn best_candidate(candidates: &[(i32, i32)], mut cost: impl FnMut((i32, i32)) -> f64) -> (i32, i32) {
    let mut best = (f64::INFINITY, candidates[0]);
    for &d in candidates {
        let c = cost(d);
        if c < best.0 {
            best = (c, d);
        }
    }
    best.1
}

/// Number of pyramid levels usable for an image, capped at `wanted`, keeping
/// the coarsest level at least `min_dim` pixels on each axis.
fn usable_levels(w: usize, h: usize, wanted: usize, min_dim: usize) -> usize {
    let mut levels = 1;
    while levels < wanted && (w >> levels) >= min_dim && (h >> levels) >= min_dim {
        levels += 1;
    }
    levels
}

fn pyramid<T: Real>(img: &LinearImage<T>, levels: usize) -> Vec<LinearImage<T>> {
    let mut p = vec![img.clone()];
    for _ in 1..levels {
        let next = gaussian_downsample(p.last().expect("non-empty"));
        p.push(next);
    }
    p
}

/// Coarse-to-fine displacement of `alt` against `reference` (both half-res
/// green planes), one displacement per level-0 alignment tile of `tile` pixels.
fn align_plane<T: Real>(
    ref_pyr: &[LinearImage<T>],
    alt: &LinearImage<T>,
    tile: usize,
    radius: i32,
) -> (LevelGrid, Vec<(i32, i32)>) {
    let alt_pyr = pyramid(alt, ref_pyr.len());
    let mut prev: Option<(LevelGrid, Vec<(i32, i32)>)> = None;
    for level in (0..ref_pyr.len()).rev() {
        let r = &ref_pyr[level];
        let grid = LevelGrid::new(r.width, r.height, tile);
        // seeds from the coarse tile under the centre and its nearest
        // horizontal and vertical neighbours
        let seeds: Vec<Vec<(i32, i32)>> = match &prev {
            None => vec![vec![(0, 0)]; grid.nx * grid.ny],
            Some((pg, pd)) => (0..grid.nx * grid.ny)
                .map(|i| {
                    let (tx, ty) = (i % grid.nx, i / grid.nx);
                    let cx = ((tx * tile) as f64 + tile as f64 / 2.0) / 2.0;
                    let cy = ((ty * tile) as f64 + tile as f64 / 2.0) / 2.0;
                    let pt = pg.tile as f64;
                    let side = |c: f64| if c.rem_euclid(pt) < pt / 2.0 { -pt } else { pt };
                    let mut out: Vec<(i32, i32)> = Vec::with_capacity(3);
                    for (px, py) in [(cx, cy), (cx + side(cx), cy), (cx, cy + side(cy))] {
                        let d = pd[pg.index_at(px, py)];
                        let d = (2 * d.0, 2 * d.1);
                        if !out.contains(&d) {
                            out.push(d);
                        }
                    }
                    out
                })
                .collect(),
        };
        let disp = match_level(r, &alt_pyr[level], &grid, &seeds, radius);
        prev = Some((grid, disp));
    }
    prev.expect("at least one level")
}

/// Residual on the half-res green plane over merge tile (i, j) at plane
/// displacement `d`: the mean-removed difference is averaged over
/// `pool` x `pool` blocks and the blocks' absolute values are averaged.
fn tile_residual<T: Real>(
    reference: &LinearImage<T>,
    alt: &LinearImage<T>,
    (i, j): (usize, usize),
    d: (i32, i32),
    pool: usize,
    rbuf: &mut Vec<f64>,
    abuf: &mut Vec<f64>,
) -> f64 {
    let (x0, y0) = (merge_origin(i), merge_origin(j));
    let mr = patch(reference, x0, y0, MERGE_TILE, rbuf);
    let ma = patch(alt, x0 + d.0 as isize, y0 + d.1 as isize, MERGE_TILE, abuf);
    let blocks = MERGE_TILE / pool;
    let mut total = 0.0;
    for by in 0..blocks {
        for bx in 0..blocks {
            let mut e = 0.0;
            for y in by * pool..(by + 1) * pool {
                for x in bx * pool..(bx + 1) * pool {
                    let k = y * MERGE_TILE + x;
                    e += (rbuf[k] - mr) - (abuf[k] - ma);
                }
            }
            total += e.abs() / (pool * pool) as f64;
        }
    }
    total / (blocks * blocks) as f64
}

/// Aligns every frame of a normalized mosaic burst to `reference`.
pub fn align_burst<T: Real>(
    mosaics: &[LinearImage<T>],
    cfa: Cfa,
    reference: usize,
    noise: &NoiseModel<T>,
    params: &AlignParams,
) -> Result<TileAlignment> {
    params.validate()?;
    if mosaics.is_empty() {
        return Err(Error::EmptyBurst);
    }
    if reference >= mosaics.len() {
        return Err(Error::InvalidParameter(format!(
            "reference {reference} outside a burst of {}",
            mosaics.len()
        )));
    }
    let ref_mosaic = &mosaics[reference];
    if ref_mosaic.width < 4 || ref_mosaic.height < 4 || !ref_mosaic.width.is_multiple_of(2) || !ref_mosaic.height.is_multiple_of(2) {
        return Err(Error::ImageTooSmall {
            width: ref_mosaic.width,
            height: ref_mosaic.height,
            levels: params.levels,
        });
    }
    let mean = ref_mosaic.mean();
    let snr = (mean / noise.sigma(mean)).as_f64();
    let tile_mosaic = params.tile_for_snr(snr);
    let tile = (tile_mosaic / 2).max(2);

    let ref_green = ref_mosaic.green_quad(cfa);
    let levels = usable_levels(ref_green.width, ref_green.height, params.levels, 4);
    if levels < params.levels {
        log::debug!("alignment pyramid reduced to {levels} levels for a {}x{} plane", ref_green.width, ref_green.height);
    }
    let ref_pyr = pyramid(&ref_green, levels);
    let (tiles_x, tiles_y) = merge_grid(ref_green.width, ref_green.height);

    let frames: Vec<FrameAlignment> = mosaics
        .par_iter()
        .enumerate()
        .map(|(z, m)| {
            let n = tiles_x * tiles_y;
            if z == reference {
                return FrameAlignment {
                    displacement: vec![(0, 0); n],
                    residual: vec![0.0; n],
                };
            }
            let alt_green = m.green_quad(cfa);
            let (grid, disp) = align_plane(&ref_pyr, &alt_green, tile, params.search_radius);
            let mut displacement = Vec::with_capacity(n);
            let mut residual = Vec::with_capacity(n);
            let (mut rbuf, mut abuf) = (Vec::new(), Vec::new());
            for j in 0..tiles_y {
                for i in 0..tiles_x {
                    let c = ((i * MERGE_STRIDE) as f64, (j * MERGE_STRIDE) as f64);
                    let d = disp[grid.index_at(c.0, c.1)];
                    residual.push(tile_residual(&ref_green, &alt_green, (i, j), d, params.residual_pool, &mut rbuf, &mut abuf));
                    displacement.push((2 * d.0, 2 * d.1));
                }
            }
            FrameAlignment {
                displacement,
                residual,
            }
        })
        .collect();

    Ok(TileAlignment {
        reference,
        tile_size: tile_mosaic,
        reference_snr: snr,
        tiles_x,
        tiles_y,
        frames,
    })
}
