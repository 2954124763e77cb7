use lowlight::motion_metering::{fit_gmm, Gmm, GmmComponent};
use lowlight::raw_model::{normalize, Cfa, CfaColor};
use lowlight::synth_oracle::{
    average_merge_oracle, awb_dataset, generate_burst, mc_min_motion, AwbSynthParams, Capture, SyntheticScene, Texture,
};
use lowlight::{LinearImage, NoiseModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn scene(texture: Texture, motion: [f64; 2]) -> SyntheticScene {
    SyntheticScene {
        width: 96,
        height: 64,
        cfa: Cfa::Rggb,
        texture,
        albedo: [1.0; 3],
        motion,
        object: None,
        illuminant: [1.0; 3],
        lux: 50.0,
        black_level: 64,
        white_level: 1023,
    }
}

fn capture(frames: usize, noise: NoiseModel, seed: u64) -> Capture {
    Capture {
        frames,
        exposure_time_s: 0.5,
        gain: 2.0,
        frame_interval_s: None,
        noise,
        seed,
        target_sensitivity_s: None,
        gyro_speed_rad_s: None,
    }
}

#[test]
fn pan_is_recorded_as_flow() {
    let s = scene(
        Texture::Stripes {
            period: 12.0,
            angle: 0.0,
            contrast: 0.8,
        },
        [2.0, 0.0],
    );
    let b = generate_burst(&s, &capture(3, NoiseModel::new(0.0, 0.0), 1)).unwrap();
    assert_eq!(b.truth.flow_magnitude, 2.0);
    assert_eq!(b.truth.flow, [2.0, 0.0]);
}

#[test]
fn generated_noise_matches_the_declared_model() {
    let mut s = scene(Texture::Flat, [0.0, 0.0]);
    s.width = 320;
    s.height = 320;
    s.albedo = [0.3, 0.9, 1.6];
    let noise = NoiseModel::new(1e-3, 2e-5);
    let b = generate_burst(&s, &capture(4, noise, 7)).unwrap();
    let at_gain = noise.at_gain(2.0);
    let quant = 1.0 / (959.0f64 * 959.0 * 12.0);
    for colour in [CfaColor::Red, CfaColor::Green, CfaColor::Blue] {
        let mut diffs = Vec::new();
        let mut level = 0.0;
        for (frame, clean) in b.burst.frames.iter().zip(&b.clean) {
            let img: LinearImage = normalize(frame);
            for y in 0..s.height {
                for x in 0..s.width {
                    if s.cfa.color_at(x, y) == colour {
                        diffs.push(img.at(x, y) - clean.at(x, y));
                        level = clean.at(x, y);
                    }
                }
            }
        }
        assert!(diffs.len() >= 100_000);
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let want = at_gain.variance(level) + quant;
        assert!((var - want).abs() <= 0.05 * want, "{colour:?} level {level}: {var} vs {want}");
    }
}

fn gmm_cdf(g: &Gmm<f64>, v: f64) -> f64 {
    g.components
        .iter()
        .map(|c| c.weight * 0.5 * libm::erfc(-(v - c.mean) / (2.0 * c.variance).sqrt()))
        .sum()
}

#[test]
fn single_draw_distribution_converges_to_mixture_cdf() {
    let g = Gmm {
        components: [
            GmmComponent {
                weight: 0.5,
                mean: 1.0,
                variance: 0.04,
            },
            GmmComponent {
                weight: 0.3,
                mean: 3.0,
                variance: 0.5,
            },
            GmmComponent {
                weight: 0.2,
                mean: 6.0,
                variance: 1.0,
            },
        ],
    };
    let mc = mc_min_motion(&g, 1, 1_000_000, 11);
    let n = mc.sorted.len() as f64;
    let ks = mc
        .sorted
        .iter()
        .enumerate()
        .step_by(97)
        .map(|(i, &v)| {
            let f = gmm_cdf(&g, v);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.005, "KS {ks}");
}

#[test]
fn min_of_k_samples_are_no_larger_than_single_draws() {
    let g = fit_gmm(&[1.0, 2.0, 2.5, 4.0, 7.0, 1.5]);
    let one = mc_min_motion(&g, 1, 100_000, 3);
    let four = mc_min_motion(&g, 4, 100_000, 3);
    for p in [0.1, 0.5, 0.9] {
        assert!(four.quantile(p) <= one.quantile(p));
    }
}

#[test]
fn plain_average_reaches_one_over_n_variance() {
    let sigma = 0.02;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = Normal::new(0.0, sigma).unwrap();
    let clean = LinearImage::from_fn(400, 250, |x, y| 0.2 + 0.001 * (x + y) as f64);
    let frames: Vec<_> = (0..8)
        .map(|_| {
            let mut f = clean.clone();
            f.data.iter_mut().for_each(|v| *v += n.sample(&mut rng));
            f
        })
        .collect();
    let avg = average_merge_oracle(&frames).unwrap();
    let var = avg.data.iter().zip(&clean.data).map(|(a, c)| (a - c).powi(2)).sum::<f64>() / clean.data.len() as f64;
    let want = sigma * sigma / 8.0;
    assert!((var - want).abs() <= 0.1 * want, "{var} vs {want}");
    assert_eq!(average_merge_oracle(&frames[..1]).unwrap(), frames[0]);
    assert_eq!(average_merge_oracle(&[clean.clone(), clean.clone()]).unwrap(), clean);
}

#[test]
fn awb_dataset_is_seeded_and_labelled() {
    let p = AwbSynthParams::default();
    let a = awb_dataset(20, 4, &p);
    let b = awb_dataset(20, 4, &p);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.thumbnail, y.thumbnail);
        assert_eq!(x.illuminant, y.illuminant);
    }
    for ex in &a {
        assert_eq!((ex.thumbnail.width, ex.thumbnail.height), (64, 48));
        assert!(ex.illuminant.iter().all(|&v| v > 0.0));
        assert!(ex.mu_t.iter().all(|&v| v >= 0.0));
        assert!(ex.exposure_time > 0.0 && ex.gain >= 1.0);
    }
    // with the tinted share doubled below 20 lux, some scenes must lack a channel
    let tinted = awb_dataset(200, 9, &p).iter().filter(|e| e.mu_t.iter().any(|&v| v < 0.05)).count();
    assert!(tinted > 10, "{tinted}");
}

#[test]
fn motion_blur_follows_exposure() {
    let s = scene(
        Texture::Stripes {
            period: 8.0,
            angle: 0.0,
            contrast: 1.0,
        },
        [4.0, 0.0],
    );
    let q = NoiseModel::new(0.0, 0.0);
    let mut short = capture(2, q, 1);
    short.frame_interval_s = Some(2.0);
    let long = capture(2, q, 1);
    let contrast = |c: &LinearImage| {
        let g: Vec<f64> = (0..s.width).filter(|x| x % 2 == 1).map(|x| c.at(x, 0)).collect();
        g.iter().cloned().fold(f64::MIN, f64::max) - g.iter().cloned().fold(f64::MAX, f64::min)
    };
    let bs = generate_burst(&s, &short).unwrap();
    let bl = generate_burst(&s, &long).unwrap();
    assert!(contrast(&bl.clean[1]) < contrast(&bs.clean[1]));
}
