use lowlight::awb::*;
use lowlight::synth_oracle::{awb_dataset, awb_scene, locus_lux, AwbSynthParams};
use lowlight::LinearImage;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn angular_error_cases() {
    let l = [0.4f64, 1.0, 0.7];
    assert!(angular_error(l, l).unwrap().abs() < 1e-6);
    assert!(angular_error(l.map(|v| 2.0 * v), l).unwrap().abs() < 1e-6);
    assert!((angular_error([1.0f64, 0.0, 0.0], [0.0, 1.0, 0.0]).unwrap() - 90.0).abs() < 1e-12);
    assert!(angular_error([0.0; 3], l).is_err());
}

#[test]
fn reproduction_error_scalar_case() {
    let want = (6.0 / (3f64.sqrt() * 18f64.sqrt())).acos().to_degrees();
    let got = reproduction_error([1.0, 1.0, 1.0], [1.0, 1.0, 4.0]).unwrap();
    assert!((got - want).abs() < 1e-9);
    assert!((got - 35.26).abs() < 0.01);
    let s = [0.3f64, 2.0, 1.1];
    let (a, b) = ([0.5f64, 1.0, 0.8], [0.9, 1.0, 0.4]);
    let r1 = reproduction_error(a, b).unwrap();
    let r2 = reproduction_error(std::array::from_fn(|c| a[c] * s[c]), std::array::from_fn(|c| b[c] * s[c])).unwrap();
    assert!((r1 - r2).abs() < 1e-9);
}

#[test]
fn are_degenerates_for_gray_scenes() {
    let (lp, lt) = ([0.6f64, 1.0, 0.9], [0.8, 1.0, 0.5]);
    let dr = reproduction_error(lp, lt).unwrap();
    for alpha in [1e-3, 0.2, 1.0, 40.0] {
        let da = anisotropic_reproduction_error(lp, lt, [alpha; 3]).unwrap();
        assert!((da - dr).abs() < 1e-9);
    }
}

#[test]
fn are_ignores_missing_channels() {
    let lt = [0.8f64, 1.0, 0.5];
    let mu = [0.0, 0.5, 0.8];
    let base = anisotropic_reproduction_error([0.6, 1.0, 0.9], lt, mu).unwrap();
    for r in [0.01, 0.3, 5.0] {
        let d = anisotropic_reproduction_error([r, 1.0, 0.9], lt, mu).unwrap();
        assert!((d - base).abs() < 1e-9);
    }
    // with only one channel present every estimate reproduces it exactly
    assert!(anisotropic_reproduction_error([0.2, 3.0, 0.1], lt, [0.0, 0.7, 0.0]).unwrap().abs() < 1e-9);
}

#[test]
fn metric_gradients_match_finite_differences() {
    let (lp, lt, mu) = ([0.7, 1.1, 0.6], [0.9, 1.0, 0.4], [0.3, 0.5, 0.2]);
    for loss in [Loss::Angular, Loss::Reproduction, Loss::Are] {
        let (v, g) = metric_with_grad(loss, lp, lt, mu);
        let f = |p: [f64; 3]| metric_with_grad(loss, p, lt, mu).0;
        assert!((v - f(lp)).abs() < 1e-15);
        for c in 0..3 {
            let h = 1e-6;
            let (mut a, mut b) = (lp, lp);
            a[c] += h;
            b[c] -= h;
            let fd = (f(a) - f(b)) / (2.0 * h);
            assert!((fd - g[c]).abs() <= 1e-5 * fd.abs().max(1.0), "{loss:?} {c}: {fd} vs {}", g[c]);
        }
    }
}

/// Solves [phi; lambda I] theta = [Y - X; 0] by SVD.
fn lstsq_oracle(x: &[[f64; 2]], y: &[[f64; 2]], sigma: f64, lambda: f64) -> Vec<[f64; 2]> {
    let n = x.len();
    let mut a = DMatrix::zeros(2 * n, n);
    for (r, &p) in x.iter().enumerate() {
        for (c, v) in rbf_row(p, x, sigma).into_iter().enumerate() {
            a[(r, c)] = v;
        }
        a[(n + r, r)] = lambda;
    }
    let svd = a.svd(true, true);
    let mut theta = vec![[0.0; 2]; n];
    for k in 0..2 {
        let mut b = DVector::zeros(2 * n);
        for r in 0..n {
            b[r] = y[r][k] - x[r][k];
        }
        let col = svd.solve(&b, 1e-14).unwrap();
        for i in 0..n {
            theta[i][k] = col[i];
        }
    }
    theta
}

fn grid(n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)])
        .collect()
}

#[test]
fn identical_calibration_points_give_zero_warp() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = grid(12, &mut rng);
    let m = rbf_fit(&x, &x, 0.4, 0.1).unwrap();
    assert!(m.theta.iter().all(|t| t[0].abs() < 1e-12 && t[1].abs() < 1e-12));
    for &p in &x {
        let f = m.forward(p);
        assert!((f[0] - p[0]).abs() < 1e-8 && (f[1] - p[1]).abs() < 1e-8);
    }
    let id = CalibrationMap::identity();
    assert_eq!(id.forward([0.3, -0.2]), [0.3, -0.2]);
}

#[test]
fn offset_and_random_warps_match_least_squares_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = grid(10, &mut rng);
    let offset: Vec<[f64; 2]> = x.iter().map(|p| [p[0] + 0.1, p[1] - 0.05]).collect();
    let x8 = grid(8, &mut rng);
    let warp: Vec<[f64; 2]> = x8
        .iter()
        .map(|p| [p[0] + 0.1 * (2.0 * p[1]).sin(), p[1] + 0.08 * (1.5 * p[0]).cos() + 0.03 * p[0] * p[1]])
        .collect();
    for (x, y) in [(&x, &offset), (&x8, &warp)] {
        let (sigma, lambda) = (0.5, 0.05);
        let m = rbf_fit(x, y, sigma, lambda).unwrap();
        let oracle = lstsq_oracle(x, y, sigma, lambda);
        for (a, b) in m.theta.iter().zip(&oracle) {
            assert!((a[0] - b[0]).abs() < 1e-8 && (a[1] - b[1]).abs() < 1e-8, "{a:?} vs {b:?}");
        }
        // the forward map reproduces the regularized fit at the calibration points
        for (i, &p) in x.iter().enumerate() {
            let row = rbf_row(p, x, sigma);
            let f = m.forward(p);
            for k in 0..2 {
                let want = p[k] + row.iter().zip(&oracle).map(|(r, t)| r * t[k]).sum::<f64>();
                assert!((f[k] - want).abs() < 1e-8);
            }
            assert!((f[0] - y[i][0]).abs() < 0.05 && (f[1] - y[i][1]).abs() < 0.05);
        }
    }
}

#[test]
fn calibration_rejects_bad_input() {
    assert!(rbf_fit(&[[0.0, 0.0]; 2], &[[0.0, 0.0]; 2], 0.3, 0.1).is_err());
    let x = [[0.0, 0.0], [0.5, 0.0], [0.0, 0.5]];
    assert!(rbf_fit(&x, &x, 0.0, 0.1).is_err());
    assert!(rbf_fit(&x, &x, 0.3, -1.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn inverse_round_trips_fitted_warps(seed in 0u64..1000, n in 3usize..=24, amp in 0.0f64..0.12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = grid(n, &mut rng);
        let y: Vec<[f64; 2]> = x
            .iter()
            .map(|p| [p[0] + amp * (1.7 * p[1]).sin(), p[1] + amp * (1.3 * p[0]).cos()])
            .collect();
        let m = rbf_fit(&x, &y, 0.5, 0.1).unwrap();
        for _ in 0..8 {
            let p = [rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7)];
            let s = m.inverse(m.forward(p)).unwrap();
            prop_assert!((s.x[0] - p[0]).abs() < 1e-8 && (s.x[1] - p[1]).abs() < 1e-8);
            prop_assert!(s.iterations <= 4, "{} iterations", s.iterations);
        }
    }

    #[test]
    fn are_is_scale_invariant(lp in prop::array::uniform3(0.05f64..3.0), lt in prop::array::uniform3(0.05f64..3.0),
                              mu in prop::array::uniform3(0.0f64..1.0), a in 0.1f64..10.0, b in 0.1f64..10.0) {
        prop_assume!(mu.iter().sum::<f64>() > 0.05);
        let d = anisotropic_reproduction_error(lp, lt, mu).unwrap();
        let e = anisotropic_reproduction_error(lp.map(|v| a * v), lt.map(|v| b * v), mu).unwrap();
        prop_assert!((d - e).abs() < 1e-7);
        prop_assert!((0.0..=90.0 + 1e-9).contains(&d));
    }
}

#[test]
fn histogram_translates_with_illuminant() {
    let config = AwbConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut img = LinearImage::new(32, 24, 3);
    for v in img.data.iter_mut() {
        *v = rng.random_range(0.1..0.6);
    }
    let h0 = histogram(&img, None, None, &config);
    let w = config.bin_width();
    let shift = [3usize, 2usize];
    // a tint of exp(-k * bin width) moves u (or v) up by k bins
    let g = [(-(shift[0] as f64) * w).exp(), 1.0, (-(shift[1] as f64) * w).exp()];
    let tinted = LinearImage {
        data: img.data.chunks(3).flat_map(|p| [p[0] * g[0], p[1], p[2] * g[2]]).collect(),
        ..img.clone()
    };
    let h1 = histogram(&tinted, None, None, &config);
    let b = config.bins;
    let centroid = |h: &SparseHistogram| {
        h.iter().fold([0.0; 2], |acc, &(i, m)| [acc[0] + m * (i / b) as f64, acc[1] + m * (i % b) as f64])
    };
    let (c0, c1) = (centroid(&h0), centroid(&h1));
    assert!((c1[0] - c0[0] - shift[0] as f64).abs() <= 1.0);
    assert!((c1[1] - c0[1] - shift[1] as f64).abs() <= 1.0);
    let total: f64 = h1.iter().map(|&(_, m)| m).sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn log_brightness_cases() {
    let gray = LinearImage::filled(16, 12, 3, 0.25);
    let l1 = log_brightness(&gray, 1.0, 1.0, 1.0).unwrap();
    assert!((l1 - 0.25f64.ln()).abs() < 1e-12);
    let l2 = log_brightness(&gray, 2.0, 1.0, 1.0).unwrap();
    assert!((l1 - l2 - 2f64.ln()).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut img = LinearImage::new(15, 9, 3);
    for v in img.data.iter_mut() {
        *v = rng.random_range(0.0..1.0);
    }
    let mut maxes: Vec<f64> = img.data.chunks(3).map(|p| p.iter().cloned().fold(0.0, f64::max)).collect();
    maxes.sort_by(f64::total_cmp);
    let want = maxes[maxes.len() / 2].ln() - (0.1f64 * 4.0 * 2.0).ln();
    assert!((log_brightness(&img, 0.1, 4.0, 2.0).unwrap() - want).abs() < 1e-12);
}

fn small_config() -> AwbConfig {
    AwbConfig {
        bins: 16,
        filter_radius: 2,
        ..AwbConfig::default()
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let config = small_config();
    let data = awb_dataset(6, 5, &AwbSynthParams::default());
    let (prepared, centres) = prepare_dataset(&data, None, &config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut model = ChromaHistogramModel::untrained(config, centres);
    for v in model.filters.iter_mut().chain(model.bias.iter_mut()) {
        *v = rng.random_range(-0.5..0.5);
    }
    let nf = model.filters.len();
    for loss in Loss::ALL {
        for ex in &prepared[..3] {
            let (mut gf, mut gb) = (vec![0.0; nf], vec![0.0; model.bias.len()]);
            model.loss_and_grad(ex, loss, &mut gf, &mut gb);
            let grads: Vec<f64> = gf.iter().chain(&gb).cloned().collect();
            let mut checked = 0;
            for _ in 0..40 {
                let i = rng.random_range(0..grads.len());
                let eval = |d: f64| {
                    let mut m = model.clone();
                    if i < nf {
                        m.filters[i] += d;
                    } else {
                        m.bias[i - nf] += d;
                    }
                    let (mut a, mut b) = (vec![0.0; nf], vec![0.0; m.bias.len()]);
                    m.loss_and_grad(ex, loss, &mut a, &mut b)
                };
                let h = 1e-5;
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let scale = fd.abs().max(grads[i].abs());
                if scale < 1e-6 {
                    continue;
                }
                checked += 1;
                assert!((fd - grads[i]).abs() <= 1e-4 * scale, "{loss:?} param {i}: fd {fd} vs {}", grads[i]);
            }
            assert!(checked > 5);
        }
    }
}

#[test]
fn trained_model_beats_untrained_and_is_deterministic() {
    let config = AwbConfig::default();
    let params = TrainParams::default();
    let data = awb_dataset(150, 7, &AwbSynthParams::default());
    let untrained = cross_validate(&data, None, None, &config, &params).unwrap();
    let trained = cross_validate(&data, Some(Loss::Are), None, &config, &params).unwrap();
    assert!(trained.are.mean < untrained.are.mean, "{} vs {}", trained.are.mean, untrained.are.mean);

    let model = train_model(&data, Loss::Are, None, &config, &params).unwrap();
    let again = train_model(&data, Loss::Are, None, &config, &params).unwrap();
    assert_eq!(model, again);
    let ex = &data[0];
    let a = predict_illuminant(&model, &ex.thumbnail, ex.exposure_time, ex.gain, 1.0, None, None).unwrap();
    let b = predict_illuminant(&model, &ex.thumbnail, ex.exposure_time, ex.gain, 1.0, None, None).unwrap();
    assert_eq!(a, b);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    model.save(&path).unwrap();
    assert_eq!(ChromaHistogramModel::load(&path).unwrap(), model);
}

#[test]
fn untrained_model_refuses_to_predict() {
    let model = ChromaHistogramModel::untrained(AwbConfig::default(), [0.0, 1.0, 2.0, 3.0]);
    let thumb = LinearImage::filled(64, 48, 3, 0.2);
    assert!(matches!(
        predict_illuminant(&model, &thumb, 0.1, 1.0, 1.0, None, None),
        Err(lowlight::Error::Untrained)
    ));
    assert!(train_model(&awb_dataset(10, 1, &AwbSynthParams::default()), Loss::Are, None, &AwbConfig::default(), &TrainParams::default()).is_err());
}

#[test]
fn gray_world_recovers_cast_of_a_gray_scene() {
    let mut thumb = LinearImage::new(8, 8, 3);
    for (i, p) in thumb.data.chunks_mut(3).enumerate() {
        let s = 0.1 + 0.005 * i as f64;
        p.copy_from_slice(&[0.6 * s, s, 0.8 * s]);
    }
    let e = gray_world(&thumb).unwrap();
    assert!((e.rgb[0] - 0.6).abs() < 1e-12 && (e.rgb[2] - 0.8).abs() < 1e-12);
}

fn trained_on_synthetics() -> (ChromaHistogramModel, AwbSynthParams) {
    let sp = AwbSynthParams::default();
    let data = awb_dataset(300, 7, &sp);
    (train_model(&data, Loss::Are, None, &AwbConfig::default(), &TrainParams::default()).unwrap(), sp)
}

#[test]
fn neutral_scenes_and_held_out_tints() {
    let (model, sp) = trained_on_synthetics();
    let predict = |ex: &AwbExample, thumb: &LinearImage| {
        predict_illuminant(&model, thumb, ex.exposure_time, ex.gain, 1.0, None, None).unwrap().rgb
    };

    // chart layouts under white light, at the brightness where the locus is neutral
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut errs: Vec<f64> = (0..40)
        .map(|_| {
            let ex = awb_scene(&sp, [1.0; 3], locus_lux(0.3), None, &mut rng);
            angular_error(predict(&ex, &ex.thumbnail), [1.0; 3]).unwrap()
        })
        .collect();
    errs.sort_by(f64::total_cmp);
    assert!(errs[20] <= 3.0, "median neutral error {}", errs[20]);

    // re-lighting a held-out scene by g moves the estimate by g
    let g = [1.03, 1.0, 0.97];
    let held = awb_dataset(60, 99, &sp);
    let mut track = 0.0;
    for ex in &held {
        let tinted = LinearImage {
            data: ex.thumbnail.data.chunks(3).flat_map(|p| [p[0] * g[0], p[1], p[2] * g[2]]).collect(),
            ..ex.thumbnail.clone()
        };
        let plain = predict(ex, &ex.thumbnail);
        let moved = predict(ex, &tinted);
        let expect = [plain[0] * g[0], plain[1], plain[2] * g[2]];
        track += anisotropic_reproduction_error(moved, expect, ex.mu_t).unwrap() / held.len() as f64;
    }
    assert!(track <= 3.0, "mean ARE between tinted estimate and tinted plain estimate {track}");
}

#[test]
fn dataset_round_trips_through_disk() {
    let data = awb_dataset(3, 2, &AwbSynthParams::default());
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &data).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in data.iter().zip(&back) {
        for (x, y) in a.thumbnail.data.iter().zip(&b.thumbnail.data) {
            assert!((x - y).abs() <= 1.0 / 65535.0);
        }
        assert_eq!(a.mu_t, b.mu_t);
    }
}
