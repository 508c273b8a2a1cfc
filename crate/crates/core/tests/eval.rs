mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::small_packs;
use nvs_contrast::eval::{
    collect_depth_stats, depth_histograms, depth_stats, psnr, ssim, weights, Bins, DensityWeighting, Histogram,
    SpikeDensity, UniformDensity, PSNR_CAP,
};
use nvs_contrast::frame::Image;

fn random_image(w: usize, h: usize, rng: &mut impl Rng) -> Image {
    Image::new(w, h, (0..w * h * 3).map(|_| rng.random()).collect()).unwrap()
}

fn psnr_oracle(a: &Image, b: &Image) -> f64 {
    let mut se = 0.0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, q) = (a.get(x, y), b.get(x, y));
            for c in 0..3 {
                se += (p[c] - q[c]).powi(2);
            }
        }
    }
    let mse = se / (a.width() * a.height() * 3) as f64;
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

/// Window-by-window SSIM with a full 2-D Gaussian kernel.
fn ssim_oracle(a: &Image, b: &Image) -> f64 {
    let (k, sigma) = (11usize, 1.5f64);
    let mut kernel = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            kernel[i * k + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for c in 0..3 {
        for y0 in 0..=a.height() - k {
            for x0 in 0..=a.width() - k {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let w = kernel[i * k + j];
                        let (p, q) = (a.get(x0 + j, y0 + i)[c], b.get(x0 + j, y0 + i)[c]);
                        mx += w * p;
                        my += w * q;
                        sxx += w * p * p;
                        syy += w * q * q;
                        sxy += w * p * q;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    acc / count as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn psnr_matches_the_loop_oracle(seed in any::<u64>(), w in 1usize..24, h in 1usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_image(w, h, &mut rng), random_image(w, h, &mut rng));
        prop_assert!((psnr(&a, &b).unwrap() - psnr_oracle(&a, &b)).abs() < 1e-10);
        prop_assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    }

    #[test]
    fn ssim_matches_the_loop_oracle_and_is_symmetric(seed in any::<u64>(), w in 11usize..20, h in 11usize..20, mix in 0.0..1.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_image(w, h, &mut rng);
        let noise = random_image(w, h, &mut rng);
        let b = Image::new(w, h, a.data().iter().zip(noise.data()).map(|(x, n)| (1.0 - mix) * x + mix * n).collect()).unwrap();
        let s = ssim(&a, &b).unwrap();
        prop_assert!((s - ssim_oracle(&a, &b)).abs() < 1e-10);
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(s <= 1.0 + 1e-12);
    }

    #[test]
    fn depth_stats_match_the_loop_oracle(
        w in prop::collection::vec(0.0..1.0f64, 1..40),
        gt in 0.1..10.0f64,
    ) {
        let total: f64 = w.iter().sum();
        prop_assume!(total > 1e-9);
        let w: Vec<f64> = w.iter().map(|x| x / total).collect();
        let d: Vec<f64> = (0..w.len()).map(|k| 0.5 + 0.3 * k as f64).collect();
        let st = depth_stats(&w, &d, gt).unwrap();
        let mut mean = 0.0;
        for k in 0..w.len() {
            mean += w[k] * d[k];
        }
        let mut var = 0.0;
        for k in 0..w.len() {
            var += w[k] * (d[k] - mean) * (d[k] - mean);
        }
        prop_assert!((st.d_hat - mean).abs() < 1e-12);
        prop_assert!((st.deviation - var.sqrt()).abs() < 1e-9);
        prop_assert!((st.error - (mean - gt).abs()).abs() < 1e-12);
    }

    #[test]
    fn histograms_count_every_value(values in prop::collection::vec(-5.0..20.0f64, 0..200), count in 1usize..60) {
        let h = Histogram::build(&values, Bins::Uniform { count, lo: 0.0, hi: 10.0 }).unwrap();
        prop_assert_eq!(h.total(), values.len() as u64);
        prop_assert_eq!(h.edges.len(), count + 1);
        let p = Histogram::build(&values, Bins::default()).unwrap();
        prop_assert_eq!(p.total(), values.len() as u64);
    }
}

#[test]
fn ssim_identity_and_negative() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_image(32, 24, &mut rng);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let neg = Image::new(32, 24, a.data().iter().map(|x| 1.0 - x).collect()).unwrap();
    assert!(ssim(&a, &neg).unwrap() < 0.5);
    assert!(ssim(&Image::filled(8, 8, [0.0; 3]), &Image::filled(8, 8, [0.0; 3])).is_err());
    assert!(psnr(&a, &Image::filled(3, 3, [0.0; 3])).is_err());
}

#[test]
fn constructed_density_models() {
    let packs = small_packs(1, 4, 16);
    let spike = collect_depth_stats(&SpikeDensity, &packs, DensityWeighting::Softmax, 2).unwrap();
    assert!(!spike.error.is_empty());
    let exact = spike.error.iter().filter(|&&e| e < 1e-9).count();
    assert!(exact as f64 >= 0.99 * spike.error.len() as f64);
    let uniform = collect_depth_stats(&UniformDensity, &packs, DensityWeighting::Softmax, 2).unwrap();
    let s0 = uniform.deviation[0];
    assert!(s0 > 0.0 && uniform.deviation.iter().all(|s| (s - s0).abs() < 1e-12));
    assert!(uniform.error.iter().zip(&spike.error).all(|(u, s)| u >= s));
    // Zero density under alpha compositing puts no mass anywhere.
    assert!(weights(&[0.0; 4], DensityWeighting::Volume).iter().all(|&w| w == 0.0));
    let h = depth_histograms(&uniform, Bins::default(), Bins::default()).unwrap();
    assert_eq!(h.n_pixels, uniform.error.len());
    assert_eq!(h.deviation.total(), h.error.total());
}
