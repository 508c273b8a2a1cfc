mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::small_packs;
use nvs_contrast::contrast::{
    build_contrast_batch, negative_weights, weighted_info_nce, ContrastConfig, NegativeMode, WeightMode,
};
use nvs_contrast::frame::{CameraView, Pixel};
use nvs_contrast::geometry::{make_positive_pair, pixel_ray, project_point};
use nvs_contrast::scene::depth_bounds;

fn naive(p: &[f64], qp: &[f64], qn: &[Vec<f64>], lambda: &[f64], tau: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let pos = (dot(p, qp) / tau).exp();
    let neg: f64 = qn.iter().zip(lambda).map(|(q, l)| l * (dot(p, q) / tau).exp()).sum();
    (1.0 + neg / pos).ln()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn weights_sum_to_the_negative_count(
        q in (0.0..640.0f64, 0.0..480.0f64),
        neg in prop::collection::vec((0.0..640.0f64, 0.0..480.0f64), 1..300),
        tau_prime in 0.1..1e5f64,
    ) {
        let negs: Vec<Pixel> = neg.iter().map(|&(x, y)| Pixel::new(x, y)).collect();
        let w = negative_weights(Pixel::new(q.0, q.1), &negs, tau_prime).unwrap();
        prop_assert!((w.iter().sum::<f64>() - negs.len() as f64).abs() < 1e-8);
        prop_assert!(w.iter().all(|&l| l >= 0.0));
    }

    #[test]
    fn farther_negatives_weigh_more(d1 in 0.0..500.0f64, d2 in 0.0..500.0f64, tau_prime in 1.0..1e4f64) {
        let q = Pixel::new(0.0, 0.0);
        let w = negative_weights(q, &[Pixel::new(d1, 0.0), Pixel::new(0.0, d2)], tau_prime).unwrap();
        prop_assert_eq!(d1 <= d2, w[0] <= w[1]);
    }

    #[test]
    fn info_nce_is_positive_and_matches_the_direct_form(
        dim in 1usize..12,
        n_neg in 1usize..20,
        tau in 0.05..2.0f64,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = || (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let p = v();
        let qp = v();
        let qn: Vec<Vec<f64>> = (0..n_neg).map(|_| v()).collect();
        let lambda: Vec<f64> = (0..n_neg).map(|k| 0.1 + k as f64 / n_neg as f64).collect();
        let l = weighted_info_nce(&p, &qp, &qn, &lambda, tau).unwrap();
        prop_assert!(l > 0.0);
        prop_assert!((l - naive(&p, &qp, &qn, &lambda, tau)).abs() < 1e-10);
    }
}

#[test]
fn info_nce_rejects_bad_inputs() {
    assert!(weighted_info_nce(&[1.0], &[1.0], &[vec![1.0]], &[1.0], 0.0).is_err());
    assert!(weighted_info_nce(&[1.0], &[1.0], &[vec![1.0]], &[], 1.0).is_err());
    assert!(weighted_info_nce(&[1.0], &[1.0, 2.0], &[vec![1.0]], &[1.0], 1.0).is_err());
}

#[test]
fn batch_pairs_are_geometrically_consistent() {
    let pack = &small_packs(1, 4, 32)[0];
    let (near, far) = depth_bounds(pack).unwrap();
    let views: Vec<&CameraView> = pack.views.iter().collect();
    let cfg = ContrastConfig {
        n_pixels: 40,
        n_neg: 16,
        ..Default::default()
    };
    let batch = build_contrast_batch(&views, &cfg, near, far, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(batch.pairs.len(), 12);
    assert!(batch.n_terms() > 0);
    for pair in &batch.pairs {
        assert_ne!(pair.i, pair.j);
        assert!(pair.pixels.len() <= pair.n_drawn);
        let (vi, vj) = (views[pair.i], views[pair.j]);
        for k in 0..pair.pixels.len() {
            let p = pair.pixels[k];
            let expected = make_positive_pair(
                p,
                &vi.camera,
                &vj.camera,
                vi.depth.as_ref().unwrap(),
                vj.depth.as_ref().unwrap(),
                cfg.eps_rel,
                cfg.depth_lookup,
            );
            assert_eq!(expected, Some(pair.positives[k]));
            assert_eq!(pair.negatives[k].len(), cfg.n_neg);
            assert!((pair.weights[k].iter().sum::<f64>() - cfg.n_neg as f64).abs() < 1e-9);
            for q in &pair.negatives[k] {
                assert!(vj.camera.intrinsics.contains(*q));
            }
            // Unclamped negatives lie on the epipolar line of p.
            let ray = pixel_ray(p, &vi.camera);
            let a = project_point(&ray.at(near), &vj.camera);
            let b = project_point(&ray.at(far), &vj.camera);
            if a.depth > 1e-3 && b.depth > 1e-3 && (b.pixel - a.pixel).norm() > 1.0 {
                let d = (b.pixel - a.pixel).normalize();
                let on_line = pair.negatives[k]
                    .iter()
                    .filter(|q| {
                        let off = *q - a.pixel;
                        (off.x * d.y - off.y * d.x).abs() < 1e-6
                    })
                    .count();
                assert!(on_line > 0);
            }
        }
    }
}

#[test]
fn random_negatives_and_unweighted_mode() {
    let pack = &small_packs(1, 3, 16)[0];
    let (near, far) = depth_bounds(pack).unwrap();
    let views: Vec<&CameraView> = pack.views.iter().collect();
    let cfg = ContrastConfig {
        n_pixels: 10,
        n_neg: 5,
        negatives: NegativeMode::Random,
        weighting: WeightMode::Unweighted,
        ..Default::default()
    };
    let batch = build_contrast_batch(&views, &cfg, near, far, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    for pair in &batch.pairs {
        for (neg, w) in pair.negatives.iter().zip(&pair.weights) {
            assert!(w.iter().all(|&l| l == 1.0));
            assert!(neg.iter().all(|q| q.x.fract() == 0.0 && q.y.fract() == 0.0));
        }
    }
    assert!(build_contrast_batch(&views[..1], &cfg, near, far, &mut ChaCha8Rng::seed_from_u64(4)).is_err());
}
