mod common;

use common::mosaic;
use lowlight::burst_align::{align_burst, select_reference, AlignParams};
use lowlight::raw_model::Cfa;
use lowlight::{LinearImage, NoiseModel};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn quiet() -> NoiseModel {
    NoiseModel::new(1e-6, 1e-8)
}

fn box_blur(m: &LinearImage, r: isize) -> LinearImage {
    // same-colour neighbours sit two pixels apart
    LinearImage::from_fn(m.width, m.height, |x, y| {
        let mut acc = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                acc += m.at_clamped(x as isize + 2 * dx, y as isize + 2 * dy);
            }
        }
        acc / ((2 * r + 1) * (2 * r + 1)) as f64
    })
}

#[test]
fn sharpest_frame_in_pool_is_chosen() {
    let sharp = mosaic(128, 96, 0.0, 0.0, 1);
    let blurred = box_blur(&sharp, 2);
    let burst = vec![blurred.clone(), blurred.clone(), sharp, blurred.clone(), blurred];
    let choice = select_reference(&burst, Cfa::Rggb, 4).unwrap();
    assert_eq!(choice.index, 2);
    assert_eq!(choice.sharpness.len(), 4);
    assert_eq!(select_reference(&burst, Cfa::Rggb, 2).unwrap().index, 0);
}

/// Exhaustive even-displacement L1 search of one merge tile's 16x16 footprint.
fn exhaustive(r: &LinearImage, a: &LinearImage, x0: isize, y0: isize, range: i32) -> (i32, i32) {
    let mut best = (f64::INFINITY, (0, 0));
    for dy in (-range..=range).step_by(2) {
        for dx in (-range..=range).step_by(2) {
            let mut s = 0.0;
            for y in 0..16 {
                for x in 0..16 {
                    let (px, py) = (x0 + x, y0 + y);
                    s += (r.at_clamped(px, py) - a.at_clamped(px + dx as isize, py + dy as isize)).abs();
                }
            }
            if s < best.0 {
                best = (s, (dx, dy));
            }
        }
    }
    best.1
}

#[test]
fn global_shift_agrees_with_exhaustive_search() {
    let r = mosaic(256, 192, 0.0, 0.0, 2);
    let alt = mosaic(256, 192, 6.0, -2.0, 2);
    let a = align_burst(&[r.clone(), alt.clone()], Cfa::Rggb, 0, &quiet(), &AlignParams::default()).unwrap();
    let nx = a.tiles_x;
    for j in 2..a.tiles_y - 2 {
        for i in 2..nx - 2 {
            let (x0, y0) = (2 * (4 * i as isize - 4), 2 * (4 * j as isize - 4));
            let want = exhaustive(&r, &alt, x0, y0, 8);
            assert_eq!(want, (6, -2));
            assert_eq!(a.frames[1].displacement[j * nx + i], want, "tile {i},{j}");
        }
    }
}

#[test]
fn unrelated_content_has_large_residuals() {
    let sigma: f64 = 0.01;
    let noise = NoiseModel::new(0.0, sigma * sigma);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = Normal::new(0.0, sigma).unwrap();
    let mut r = mosaic(256, 192, 0.0, 0.0, 5);
    let mut alt = mosaic(256, 192, 0.0, 0.0, 6);
    for v in r.data.iter_mut().chain(alt.data.iter_mut()) {
        *v += n.sample(&mut rng);
    }
    let a = align_burst(&[r, alt], Cfa::Rggb, 0, &noise, &AlignParams::default()).unwrap();
    // mean |n1 - n2| of 2x2 block means: sigma * sqrt(2) / 2 * sqrt(2 / pi)
    let predicted = sigma * 2f64.sqrt() / 2.0 * (2.0 / std::f64::consts::PI).sqrt();
    let res = &a.frames[1].residual;
    let large = res.iter().filter(|&&d| d > 3.0 * predicted).count();
    assert!(large as f64 >= 0.95 * res.len() as f64, "{large}/{}", res.len());
}

#[test]
fn aligned_noiseless_tiles_have_zero_residual() {
    let r = mosaic(128, 96, 0.0, 0.0, 7);
    let a = align_burst(&[r.clone(), r.clone(), r], Cfa::Rggb, 1, &quiet(), &AlignParams::default()).unwrap();
    assert_eq!(a.reference, 1);
    for f in &a.frames {
        assert!(f.residual.iter().all(|&d| d == 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn integer_shifts_are_recovered(hx in -12i32..=12, hy in -12i32..=12, seed in 0u64..100) {
        let (sx, sy) = (2 * hx, 2 * hy);
        let r = mosaic(256, 192, 0.0, 0.0, seed);
        let alt = mosaic(256, 192, sx as f64, sy as f64, seed);
        let a = align_burst(&[r, alt], Cfa::Rggb, 0, &quiet(), &AlignParams::default()).unwrap();
        let nx = a.tiles_x;
        // tiles whose footprint and match stay inside the frame
        let margin = 2 + (sx.abs().max(sy.abs()) as usize).div_ceil(8);
        let mut total = 0;
        let mut hit = 0;
        for j in margin..a.tiles_y - margin {
            for i in margin..nx - margin {
                total += 1;
                hit += usize::from(a.frames[1].displacement[j * nx + i] == (sx, sy));
            }
        }
        prop_assert!(hit as f64 >= 0.99 * total as f64, "{}/{}", hit, total);
    }

    #[test]
    fn displacements_stay_in_search_range(seed in 0u64..100) {
        let p = AlignParams::default();
        let r = mosaic(128, 96, 0.0, 0.0, seed);
        let alt = mosaic(128, 96, 0.0, 0.0, seed + 1000);
        let a = align_burst(&[r, alt], Cfa::Rggb, 0, &quiet(), &p).unwrap();
        // half-resolution search radius times the pyramid span, in mosaic pixels
        let bound = 2 * p.search_radius * ((1 << p.levels) - 1);
        for &(dx, dy) in &a.frames[1].displacement {
            prop_assert!(dx.abs() <= bound && dy.abs() <= bound);
        }
        prop_assert!(a.frames[1].residual.iter().all(|&d| d >= 0.0));
    }
}
