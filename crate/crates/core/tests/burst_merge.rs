mod common;

use common::mosaic;
use lowlight::burst_align::{align_burst, merge_origin, AlignParams, FrameAlignment, TileAlignment};
use lowlight::burst_merge::{
    merge_baseline, merge_fourier, mismatch, mismatch_maps, spatial_denoise, strength_factor, MergeParams, MergedRaw,
};
use lowlight::raw_model::Cfa;
use lowlight::synth_oracle::average_merge_oracle;
use lowlight::{LinearImage, NoiseModel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn add_noise(img: &LinearImage, sigma: f64, rng: &mut ChaCha8Rng) -> LinearImage {
    let n = Normal::new(0.0, sigma).unwrap();
    let mut out = img.clone();
    out.data.iter_mut().for_each(|v| *v += n.sample(rng));
    out
}

fn noisy_burst(clean: &LinearImage, frames: usize, sigma: f64, seed: u64) -> Vec<LinearImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..frames).map(|_| add_noise(clean, sigma, &mut rng)).collect()
}

fn flat_noise(sigma: f64) -> NoiseModel {
    NoiseModel::new(0.0, sigma * sigma)
}

fn mse(a: &LinearImage, b: &LinearImage) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len() as f64
}

/// Mean squared difference between horizontally adjacent same-colour samples.
fn hf_energy(m: &LinearImage) -> f64 {
    let mut s = 0.0;
    let mut n = 0;
    for y in 0..m.height {
        for x in 0..m.width - 2 {
            s += (m.at(x + 2, y) - m.at(x, y)).powi(2);
            n += 1;
        }
    }
    s / n as f64
}

#[test]
fn fixed_strength_mode_equals_baseline() {
    let sigma = 0.03;
    let frames = noisy_burst(&mosaic(128, 96, 0.0, 0.0, 1), 5, sigma, 2);
    let noise = flat_noise(sigma);
    let a = align_burst(&frames, Cfa::Rggb, 0, &noise, &AlignParams::default()).unwrap();
    let params = MergeParams {
        force_f1: true,
        ..MergeParams::default()
    };
    let mm = mismatch_maps(&frames[0], &a, &noise, &params).unwrap();
    let fourier = merge_fourier(&frames, &a, &mm, &noise, &params).unwrap();
    let base = merge_baseline(&frames, &a, &noise, &params).unwrap();
    assert_eq!(fourier, base);
}

#[test]
fn static_burst_variance_reaches_one_over_n() {
    let sigma = 0.02;
    let clean = mosaic(256, 192, 0.0, 0.0, 3);
    let frames = noisy_burst(&clean, 8, sigma, 4);
    let noise = flat_noise(sigma);
    let a = align_burst(&frames, Cfa::Rggb, 0, &noise, &AlignParams::default()).unwrap();
    let params = MergeParams {
        temporal_strength: 1e4,
        ..MergeParams::default()
    };
    let mm = mismatch_maps(&frames[0], &a, &noise, &params).unwrap();
    let merged = merge_fourier(&frames, &a, &mm, &noise, &params).unwrap();
    let target = sigma * sigma / 8.0;
    let got = mse(&merged.mosaic, &clean);
    assert!((got - target).abs() <= 0.25 * target, "{got} vs {target}");
    let oracle = mse(&average_merge_oracle(&frames).unwrap(), &clean);
    assert!((got - oracle).abs() <= 0.25 * oracle);
    assert!(merged.n_eff.iter().all(|&n| n > 7.5 && n <= 8.0));
}

/// Burst with frame `moving` showing random binary content inside `rect` (x0, y0, x1, y1).
fn burst_with_replaced_region(sigma: f64, moving: usize, rect: (usize, usize, usize, usize)) -> Vec<LinearImage> {
    let clean = mosaic(192, 128, 0.0, 0.0, 10);
    let mut replaced = clean.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for y in rect.1..rect.3 {
        for x in rect.0..rect.2 {
            replaced.set(x, y, if rng.random_bool(0.5) { 0.9 } else { 0.05 });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    (0..8)
        .map(|z| add_noise(if z == moving { &replaced } else { &clean }, sigma, &mut rng))
        .collect()
}

/// Merge tiles whose 16x16 footprint lies inside or entirely outside `rect`.
fn classify(a: &TileAlignment, rect: (usize, usize, usize, usize)) -> (Vec<usize>, Vec<usize>) {
    let (mut inside, mut outside) = (vec![], vec![]);
    for j in 0..a.tiles_y {
        for i in 0..a.tiles_x {
            let (x0, y0) = (2 * merge_origin(i), 2 * merge_origin(j));
            if x0 < 0 || y0 < 0 {
                continue;
            }
            let (x0, y0) = (x0 as usize, y0 as usize);
            let (x1, y1) = (x0 + 16, y0 + 16);
            if x1 > 192 || y1 > 128 {
                continue;
            }
            if x0 >= rect.0 && y0 >= rect.1 && x1 <= rect.2 && y1 <= rect.3 {
                inside.push(j * a.tiles_x + i);
            } else if x1 <= rect.0 || y1 <= rect.1 || x0 >= rect.2 || y0 >= rect.3 {
                outside.push(j * a.tiles_x + i);
            }
        }
    }
    (inside, outside)
}

#[test]
fn replaced_content_is_rejected_and_static_tiles_merge() {
    let sigma = 0.05;
    // exactly one merge tile footprint
    let rect = (88, 56, 104, 72);
    let frames = burst_with_replaced_region(sigma, 3, rect);
    let noise = flat_noise(sigma);
    let a = align_burst(&frames, Cfa::Rggb, 0, &noise, &AlignParams::default()).unwrap();
    let params = MergeParams::default();
    let mm = mismatch_maps(&frames[0], &a, &noise, &params).unwrap();
    assert_eq!(mm.max_f(), 8.0);
    let merged = merge_fourier(&frames, &a, &mm, &noise, &params).unwrap();
    let (inside, outside) = classify(&a, rect);
    assert_eq!(inside.len(), 1);
    for &t in &inside {
        assert!(merged.mean_weight[3][t] < 0.1, "moving tile {t}: {}", merged.mean_weight[3][t]);
    }
    for z in 1..8 {
        let mean = outside.iter().map(|&t| merged.mean_weight[z][t]).sum::<f64>() / outside.len() as f64;
        assert!(mean > 0.8, "frame {z} static mean weight {mean}");
    }
}

#[test]
fn colour_planes_are_coupled() {
    // only the red sites of frame 1 disagree; the shared weight still rejects the whole tile
    let clean = mosaic(64, 64, 0.0, 0.0, 20);
    let mut alt = clean.clone();
    for y in (0..64).step_by(2) {
        for x in (0..64).step_by(2) {
            alt.set(x, y, 1.0 - clean.at(x, y));
        }
    }
    let noise = flat_noise(0.001);
    let frames = vec![clean.clone(), alt];
    let a = align_burst(&frames, Cfa::Rggb, 0, &noise, &AlignParams { tile_size: Some(16), ..AlignParams::default() }).unwrap();
    let params = MergeParams::default();
    let merged = merge_baseline(&frames, &a, &noise, &params).unwrap();
    let green_in = clean.green_quad(Cfa::Rggb);
    let green_out = merged.mosaic.green_quad(Cfa::Rggb);
    assert!(mse(&green_in, &green_out) < 1e-8);
    // green alone would merge at full weight
    assert!(merged.mean_weight[1].iter().all(|&w| w < 0.25), "{:?}", merged.mean_weight[1]);
}

#[test]
fn mismatch_maps_match_scalar_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let reference = mosaic(80, 48, 0.0, 0.0, 31);
    let (tx, ty) = ((40 - 1) / 4 + 2, (24 - 1) / 4 + 2);
    let frames = (0..3)
        .map(|z| FrameAlignment {
            displacement: vec![(0, 0); tx * ty],
            residual: (0..tx * ty).map(|_| if z == 0 { 0.0 } else { rng.random_range(0.0..0.1) }).collect(),
        })
        .collect();
    let a = TileAlignment {
        reference: 0,
        tile_size: 16,
        reference_snr: 10.0,
        tiles_x: tx,
        tiles_y: ty,
        frames,
    };
    let noise = NoiseModel::new(2e-3, 1e-5);
    let params = MergeParams::default();
    let mm = mismatch_maps(&reference, &a, &noise, &params).unwrap();
    for z in 0..3 {
        for t in 0..tx * ty {
            let (x0, y0) = (2 * merge_origin(t % tx), 2 * merge_origin(t / tx));
            let mut s = 0.0;
            for y in 0..16 {
                for x in 0..16 {
                    s += reference.at_clamped(x0 + x, y0 + y);
                }
            }
            let mu = s / 256.0;
            let var = 2.0 * (2e-3 * mu + 1e-5);
            let d = a.frames[z].residual[t];
            let want = d * d / (d * d + 0.5 * var);
            assert!((mm.m[z][t] - want).abs() < 1e-12);
            assert_eq!(mm.f[z][t], strength_factor(mm.m[z][t], mm.scene_noise, &params));
        }
    }
}

fn merged_with(mosaic: LinearImage, n_eff: f64, frames: usize) -> MergedRaw<f64> {
    let (tx, ty) = ((mosaic.width / 2 - 1) / 4 + 2, (mosaic.height / 2 - 1) / 4 + 2);
    MergedRaw {
        mosaic,
        tiles_x: tx,
        tiles_y: ty,
        frames,
        n_eff: vec![n_eff; tx * ty],
        mean_weight: vec![],
    }
}

#[test]
fn fewer_merged_frames_get_stronger_denoising() {
    let sigma = 0.02;
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let input = add_noise(&mosaic(96, 64, 0.0, 0.0, 41), sigma, &mut rng);
    let noise = flat_noise(sigma);
    let p = MergeParams::default();
    let e_in = hf_energy(&input);
    let one = spatial_denoise(&merged_with(input.clone(), 1.0, 13), &noise, &p).unwrap();
    let many = spatial_denoise(&merged_with(input, 13.0, 13), &noise, &p).unwrap();
    let (e1, e13) = (hf_energy(&one.mosaic), hf_energy(&many.mosaic));
    assert!(e1 < e13 && e13 < e_in, "{e1} {e13} {e_in}");
}

#[test]
fn pure_noise_loses_most_high_frequency_energy() {
    let sigma = 0.02;
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let input = add_noise(&LinearImage::filled(128, 96, 1, 0.3), sigma, &mut rng);
    let out = spatial_denoise(&merged_with(input.clone(), 1.0, 1), &flat_noise(sigma), &MergeParams::default()).unwrap();
    let ratio = hf_energy(&out.mosaic) / hf_energy(&input);
    assert!(ratio <= 0.3, "{ratio}");
}

#[test]
fn merge_is_independent_of_thread_count() {
    let sigma = 0.03;
    let frames = noisy_burst(&mosaic(128, 96, 0.0, 0.0, 60), 4, sigma, 61);
    let noise = flat_noise(sigma);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let a = align_burst(&frames, Cfa::Rggb, 0, &noise, &AlignParams::default()).unwrap();
            let p = MergeParams::default();
            let mm = mismatch_maps(&frames[0], &a, &noise, &p).unwrap();
            let m = merge_fourier(&frames, &a, &mm, &noise, &p).unwrap();
            spatial_denoise(&m, &noise, &p).unwrap()
        })
    };
    assert_eq!(run(1), run(4));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mismatch_and_strength_stay_in_range(d in 0.0f64..10.0, s in 0.01f64..4.0, var in 1e-8f64..1.0, noise in 0.0f64..0.1) {
        let m = mismatch(d, s, var);
        prop_assert!((0.0..=1.0).contains(&m));
        prop_assert!(mismatch(d * 1.5 + 1e-9, s, var) >= m);
        let p = MergeParams::default();
        let f = strength_factor(m, noise, &p);
        prop_assert!(f >= p.f_min && f <= p.f_max(noise));
    }

    #[test]
    fn stronger_temporal_strength_merges_more(seed in 0u64..500, c in 0.1f64..4.0) {
        let sigma = 0.02;
        let frames = noisy_burst(&mosaic(32, 32, 0.0, 0.0, seed), 3, sigma, seed + 1);
        let noise = flat_noise(sigma);
        let a = align_burst(&frames, Cfa::Rggb, 0, &noise, &AlignParams::default()).unwrap();
        let weak = merge_baseline(&frames, &a, &noise, &MergeParams { temporal_strength: c, ..MergeParams::default() }).unwrap();
        let strong = merge_baseline(&frames, &a, &noise, &MergeParams { temporal_strength: 2.0 * c, ..MergeParams::default() }).unwrap();
        for z in 1..3 {
            for (w, s) in weak.mean_weight[z].iter().zip(&strong.mean_weight[z]) {
                prop_assert!(s > w);
            }
        }
        prop_assert!(strong.n_eff.iter().all(|&n| (1.0..=3.0).contains(&n)));
    }
}
