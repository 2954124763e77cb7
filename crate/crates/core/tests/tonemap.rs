use lowlight::awb::IlluminantEstimate;
use lowlight::pipeline::plain_rendition;
use lowlight::raw_model::Cfa;
use lowlight::tonemap::{
    boost_saturation, finish, fuse, highlight_gain, luma, shadow_gain, srgb_decode, srgb_encode, tone_curve,
    vignette_gain, SceneStats, ToneFlags, ToneParams,
};
use lowlight::LinearImage;
use proptest::prelude::*;

fn neutral() -> IlluminantEstimate {
    IlluminantEstimate::from_rgb([1.0; 3], "test").unwrap()
}

fn textured(w: usize, h: usize) -> LinearImage {
    LinearImage::from_fn(w, h, |x, y| 0.05 + 0.2 * (((x * 7 + y * 13) % 29) as f64 / 29.0))
}

#[test]
fn shadow_gain_endpoints_and_midpoint() {
    let p = ToneParams::default();
    assert_eq!(shadow_gain(200.0, &p), 1.0);
    assert_eq!(shadow_gain(0.1, &p), 2.2);
    let mid = (0.1f64 * 200.0).sqrt();
    assert!((shadow_gain(mid, &p) - 2.2f64.sqrt()).abs() < 1e-12);
    assert!((shadow_gain(mid, &p) - 1.483).abs() < 1e-3);
}

#[test]
fn highlight_gain_cases() {
    let p = ToneParams::default();
    assert_eq!(highlight_gain(1.0, 0.3, &p), 1.0);
    assert!((highlight_gain(2.2, 0.0, &p) - 1.24).abs() < 1e-12);
    assert_eq!(highlight_gain(2.2, 1.0, &p), 1.0);
}

#[test]
fn bright_wide_range_scene_matches_plain_rendition() {
    let m = textured(64, 48);
    let stats = SceneStats::new(300.0, 1.0).unwrap();
    let linear = ToneParams {
        contrast: 0.0,
        ..ToneParams::default()
    };
    let (img, dec) = finish(&m, Cfa::Rggb, &neutral(), &stats, &linear).unwrap();
    assert_eq!((dec.shadow_gain, dec.highlight_gain, dec.saturation, dec.vignette_ramp), (1.0, 1.0, 1.0, 0.0));
    let plain = plain_rendition(&m, Cfa::Rggb, &neutral()).unwrap();
    for (a, b) in img.data.iter().zip(&plain.data) {
        assert!((*a as i32 - *b as i32).abs() <= 1);
    }
    let p = ToneParams::default();
    let none = ToneParams {
        flags: ToneFlags::none(),
        ..p.clone()
    };
    let (a, _) = finish(&m, Cfa::Rggb, &neutral(), &stats, &p).unwrap();
    let (b, _) = finish(&m, Cfa::Rggb, &neutral(), &stats, &none).unwrap();
    for (x, y) in a.data.iter().zip(&b.data) {
        assert!((*x as i32 - *y as i32).abs() <= 1);
    }
}

#[test]
fn flat_field_shows_configured_vignette() {
    let (w, h) = (81, 61);
    let m = LinearImage::filled(w, h, 1, 0.08);
    let ev = 0.4;
    let p = ToneParams {
        contrast: 0.0,
        flags: ToneFlags {
            black_point: false,
            ..ToneFlags::default()
        },
        ..ToneParams::default()
    };
    let stats = SceneStats::new(ev, 0.5).unwrap();
    let (img, dec) = finish(&m, Cfa::Rggb, &neutral(), &stats, &p).unwrap();
    assert!(dec.vignette_ramp > 0.0);
    let centre = img.at(40, 30)[1];
    let corner = img.at(0, 0)[1];
    assert!(centre > corner);
    let expected_ratio = vignette_gain(1.0, p.vignette_strength, p.vignette_ramp(ev));
    let predicted = srgb_encode(srgb_decode(centre as f64 / 255.0) * expected_ratio) * 255.0;
    assert!((predicted - corner as f64).abs() <= 1.0, "{predicted} vs {corner}");
}

#[test]
fn black_input_stays_black() {
    let m = LinearImage::new(32, 24, 1);
    for ev in [0.1, 3.0, 300.0] {
        let (img, _) = finish(&m, Cfa::Rggb, &neutral(), &SceneStats::new(ev, 0.0).unwrap(), &ToneParams::default()).unwrap();
        assert!(img.data.iter().all(|&v| v == 0));
    }
}

#[test]
fn dark_scenes_pin_the_darkest_pixels_near_black() {
    let m = textured(64, 48);
    let stats = SceneStats::new(1.0, 0.4).unwrap();
    let (img, dec) = finish(&m, Cfa::Rggb, &neutral(), &stats, &ToneParams::default()).unwrap();
    assert!(dec.black_point > 0.0);
    let mut lum: Vec<f64> = img
        .data
        .chunks(3)
        .map(|p| luma([p[0] as f64, p[1] as f64, p[2] as f64]))
        .collect();
    lum.sort_by(f64::total_cmp);
    assert!(lum[lum.len() / 200] <= 2.0);
}

fn hue(p: [f64; 3]) -> f64 {
    (3f64.sqrt() * (p[1] - p[2])).atan2(2.0 * p[0] - p[1] - p[2]).to_degrees()
}

proptest! {
    #[test]
    fn shadow_gain_is_bounded_and_non_increasing(a in 0.01f64..1000.0, b in 0.01f64..1000.0, d in 0.0f64..=1.0) {
        let p = ToneParams::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (gl, gh) = (shadow_gain(lo, &p), shadow_gain(hi, &p));
        prop_assert!(gh <= gl);
        prop_assert!((1.0..=2.2).contains(&gl));
        let ah = highlight_gain(gl, d, &p);
        prop_assert!(ah >= 1.0 && ah <= 1.0 + 0.2 * (gl - 1.0) + 1e-15);
    }

    #[test]
    fn fusion_is_convex(s in prop::array::uniform3(0.0f64..3.0), k in 0.2f64..1.0) {
        let h = s.map(|v| v * k);
        let f = fuse(s, h, &ToneParams::default());
        for c in 0..3 {
            prop_assert!(f[c] >= h[c].min(s[c]) - 1e-12 && f[c] <= h[c].max(s[c]) + 1e-12);
        }
    }

    #[test]
    fn tone_curve_is_monotone(a in -0.5f64..2.0, b in -0.5f64..2.0, contrast in 0.0f64..=1.0, black in 0.0f64..0.5) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(tone_curve(lo, contrast, black) <= tone_curve(hi, contrast, black));
    }

    #[test]
    fn saturation_boost_preserves_hue(p in prop::array::uniform3(0.01f64..1.0), s in 1.0f64..1.2) {
        prop_assume!((p[0] - p[1]).abs() + (p[1] - p[2]).abs() > 1e-3);
        let q = boost_saturation(p, s);
        let d = (hue(q) - hue(p) + 540.0).rem_euclid(360.0) - 180.0;
        prop_assert!(d.abs() < 0.5);
        prop_assert!(q.iter().all(|&v| v >= -1e-12));
        prop_assert!((luma(q) - luma(p)).abs() < 1e-12);
    }
}
