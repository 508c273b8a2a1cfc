mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{small_packs, tiny_model_config};
use nvs_contrast::autodiff::{ParamStore, Session, Tensor};
use nvs_contrast::eval::{softmax_weights, volume_weights};
use nvs_contrast::frame::{CameraView, Image, Pixel};
use nvs_contrast::geometry::{pixel_ray, Camera};
use nvs_contrast::model::Model;
use nvs_contrast::render::{
    accumulate_softmax, accumulate_softmax_values, fine_resample, merge_depths, point_features, Sampling,
};
use nvs_contrast::scene::{depth_bounds, BACKGROUND};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn accumulated_color_is_a_convex_combination(
        samples in prop::collection::vec(((0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64), -50.0..50.0f64), 1..64),
    ) {
        let colors: Vec<[f64; 3]> = samples.iter().map(|((r, g, b), _)| [*r, *g, *b]).collect();
        let sigma: Vec<f64> = samples.iter().map(|(_, s)| *s).collect();
        let (c, w) = accumulate_softmax_values(&colors, &sigma).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (ch, &v) in c.iter().enumerate() {
            let lo = colors.iter().map(|c| c[ch]).fold(f64::INFINITY, f64::min);
            let hi = colors.iter().map(|c| c[ch]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn volume_weights_telescope(sigma in prop::collection::vec(0.0..3.0f64, 1..64)) {
        let total: f64 = volume_weights(&sigma).iter().sum();
        prop_assert!((1.0 - total - (-sigma.iter().sum::<f64>()).exp()).abs() < 1e-12);
    }

    #[test]
    fn softmax_weights_are_shift_invariant(sigma in prop::collection::vec(-30.0..30.0f64, 1..32), shift in -100.0..100.0f64) {
        let a = softmax_weights(&sigma);
        let shifted: Vec<f64> = sigma.iter().map(|s| s + shift).collect();
        let b = softmax_weights(&shifted);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fine_samples_are_sorted_and_bounded(
        w in prop::collection::vec(0.0..1.0f64, 2..32),
        n_fine in 1usize..64,
        seed in prop::option::of(any::<u64>()),
    ) {
        prop_assume!(w.iter().sum::<f64>() > 1e-9);
        let depths: Vec<f64> = (0..w.len()).map(|k| 1.0 + k as f64 * 0.25).collect();
        let f = fine_resample(&w, &depths, n_fine, seed).unwrap();
        prop_assert_eq!(f.len(), n_fine);
        prop_assert!(f.windows(2).all(|p| p[0] <= p[1]));
        let half = 0.125;
        prop_assert!(f.iter().all(|&d| d >= depths[0] - half - 1e-12 && d <= depths[depths.len() - 1] + half + 1e-12));
        let merged = merge_depths(&depths, &f);
        prop_assert_eq!(merged.len(), depths.len() + n_fine);
        prop_assert!(merged.windows(2).all(|p| p[0] <= p[1]));
    }
}

#[test]
fn graph_accumulation_matches_the_scalar_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (rays, samples) = (7, 5);
    let colors: Vec<[f64; 3]> = (0..rays * samples)
        .map(|_| [rng.random(), rng.random(), rng.random()])
        .collect();
    let sigma: Vec<f64> = (0..rays * samples).map(|_| rng.random_range(-4.0..4.0)).collect();
    let store = ParamStore::new();
    let mut s = Session::eval(&store);
    let c = s.constant(Tensor::from_vec(rays * samples, 3, colors.iter().flatten().copied().collect()).unwrap());
    let sg = s.constant(Tensor::column(sigma.clone()));
    let (out, _) = accumulate_softmax(&mut s, c, sg, samples);
    for r in 0..rays {
        let (expected, _) = accumulate_softmax_values(
            &colors[r * samples..(r + 1) * samples],
            &sigma[r * samples..(r + 1) * samples],
        )
        .unwrap();
        for (ch, e) in expected.iter().enumerate() {
            assert!((s.value(out).get(r, ch) - e).abs() < 1e-14);
        }
    }
}

#[test]
fn point_features_mark_views_that_cannot_see_a_sample() {
    let pack = &small_packs(1, 4, 16)[0];
    let (near, far) = depth_bounds(pack).unwrap();
    let sources: Vec<&CameraView> = pack.views[1..].iter().collect();
    let cams: Vec<&Camera> = sources.iter().map(|v| &v.camera).collect();
    let imgs: Vec<&Image> = sources.iter().map(|v| &v.image).collect();
    let ray = pixel_ray(Pixel::new(7.0, 7.0), &pack.views[0].camera);
    let depths = vec![vec![near, (near + far) / 2.0, far]];
    let grid = nvs_contrast::features::Grid {
        n_views: 3,
        height: 16,
        width: 16,
        channels: 1,
        stride: 1,
    };
    let pts = point_features(&[ray], &depths, &cams, &imgs, grid).unwrap();
    assert_eq!(pts.rows(), 9);
    for (row, &ok) in pts.valid.iter().enumerate() {
        let entries = pts.features.row_entries(row).count();
        if ok {
            assert!(entries > 0);
        } else {
            assert_eq!(entries, 0);
            assert_eq!(pts.rgb.row(row), &[0.0, 0.0, 0.0]);
        }
    }
}

#[test]
fn rendered_views_stay_in_the_color_hull_and_are_deterministic() {
    let pack = &small_packs(1, 5, 16)[0];
    let (near, far) = depth_bounds(pack).unwrap();
    let model = Model::new(tiny_model_config(), 3).unwrap();
    let sources: Vec<&CameraView> = pack.views[1..].iter().collect();
    let a = model
        .render_view(&pack.views[0].camera, &sources, near, far, 64)
        .unwrap();
    let b = model
        .render_view(&pack.views[0].camera, &sources, near, far, 100)
        .unwrap();
    assert_eq!(a.image, b.image);
    let (mut lo, mut hi) = (BACKGROUND, BACKGROUND);
    for v in &sources {
        for px in v.image.data().chunks(3) {
            for ch in 0..3 {
                lo[ch] = lo[ch].min(px[ch]);
                hi[ch] = hi[ch].max(px[ch]);
            }
        }
    }
    for px in a.image.data().chunks(3) {
        for ch in 0..3 {
            assert!(px[ch] >= lo[ch] - 1e-12 && px[ch] <= hi[ch] + 1e-12);
        }
    }
    assert!(a
        .depth
        .data()
        .iter()
        .all(|d| *d >= near * (1.0 - 1e-9) && *d <= far * (1.0 + 1e-9)));
}

#[test]
fn stratified_rendering_depends_only_on_the_seed() {
    let pack = &small_packs(1, 4, 16)[0];
    let (near, far) = depth_bounds(pack).unwrap();
    let model = Model::new(tiny_model_config(), 4).unwrap();
    let sources: Vec<&CameraView> = pack.views[1..].iter().collect();
    let cams: Vec<&Camera> = sources.iter().map(|v| &v.camera).collect();
    let imgs: Vec<&Image> = sources.iter().map(|v| &v.image).collect();
    let rays: Vec<_> = (0..6)
        .map(|k| pixel_ray(Pixel::new(k as f64 * 2.0, 5.0), &pack.views[0].camera))
        .collect();
    let run = |seed: u64| {
        let mut s = Session::eval(&model.params);
        let maps = model.features.forward(&mut s, &imgs, &cams, near, far, 1).unwrap();
        let out = model
            .renderer
            .render(
                &mut s,
                maps.render,
                maps.render_grid,
                &sources,
                &rays,
                near,
                far,
                Sampling::Stratified(seed),
            )
            .unwrap();
        (s.value(out.fine).clone(), out.fine_depths)
    };
    let (a, da) = run(8);
    let (b, db) = run(8);
    let (_, dc) = run(9);
    assert_eq!(a, b);
    assert_eq!(da, db);
    assert_ne!(da, dc);
    for d in &da {
        assert_eq!(d.len(), 12);
        assert!(d.windows(2).all(|p| p[0] <= p[1]));
    }
}
