#![allow(dead_code)]

use lowlight::LinearImage;

fn lattice(ix: i64, iy: i64, seed: u64) -> f64 {
    let mut h = (ix as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (iy as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
        ^ seed.wrapping_mul(0x1656_67b1_9e37_79f9);
    h ^= h >> 29;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 32;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Aperiodic two-octave value noise in [0.1, 0.8].
pub fn texture(x: f64, y: f64, seed: u64) -> f64 {
    let octave = |s: f64| {
        let (u, v) = (x / s, y / s);
        let (ix, iy) = (u.floor() as i64, v.floor() as i64);
        let (fx, fy) = (u - u.floor(), v - v.floor());
        let a = lattice(ix, iy, seed) * (1.0 - fx) + lattice(ix + 1, iy, seed) * fx;
        let b = lattice(ix, iy + 1, seed) * (1.0 - fx) + lattice(ix + 1, iy + 1, seed) * fx;
        a * (1.0 - fy) + b * fy
    };
    0.1 + 0.4 * octave(24.0) + 0.3 * octave(5.0)
}

/// Mosaic showing the texture displaced by (sx, sy).
pub fn mosaic(w: usize, h: usize, sx: f64, sy: f64, seed: u64) -> LinearImage {
    LinearImage::from_fn(w, h, |x, y| texture(x as f64 - sx, y as f64 - sy, seed))
}
