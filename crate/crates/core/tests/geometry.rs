mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{nearby_camera, random_camera};
use nvs_contrast::frame::Pixel;
use nvs_contrast::geometry::{
    camera_distance, depths_at_fractions, epipolar_projections, even_fractions, midpoint_fractions, pixel_ray,
    project_point, ray_through_pixel, sample_ray_depths, CameraExtrinsics, CameraIntrinsics, Vec3,
};
use nvs_contrast::scene::{frustum_overlap, frustum_volume, Frustum};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn projection_inverts_the_pixel_ray(seed in any::<u64>(), fx in 0.0..1.0f64, fy in 0.0..1.0f64, depth in 0.01..100.0f64) {
        let cam = random_camera(&mut ChaCha8Rng::seed_from_u64(seed));
        let u = Pixel::new(fx * cam.width() as f64 - 0.5, fy * cam.height() as f64 - 0.5);
        let proj = project_point(&pixel_ray(u, &cam).at(depth), &cam);
        prop_assert!((proj.pixel - u).norm() < 1e-8);
        prop_assert!((proj.depth - depth).abs() < 1e-8 * depth.max(1.0));
    }

    #[test]
    fn epipolar_projections_are_collinear(seed in any::<u64>(), fx in 0.0..1.0f64, fy in 0.0..1.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cam_i = random_camera(&mut rng);
        let cam_j = nearby_camera(&cam_i, 1.0, 0.6, &mut rng);
        let u = Pixel::new(fx * (cam_i.width() - 1) as f64, fy * (cam_i.height() - 1) as f64);
        let ep = epipolar_projections(u, &cam_i, &cam_j, 32, 0.2, 30.0, seed).unwrap();
        let pts: Vec<Pixel> = ep.projections.iter().filter(|p| p.depth > 1e-3).map(|p| p.pixel).collect();
        prop_assume!(pts.len() >= 3 && (pts[pts.len() - 1] - pts[0]).norm() > 1.0);
        let (a, b) = (pts[0], pts[pts.len() - 1]);
        let d = (b - a).normalize();
        for p in &pts {
            let off = p - a;
            let scale = 1.0 + off.norm();
            prop_assert!((off.x * d.y - off.y * d.x).abs() < 1e-6 * scale);
        }
    }

    #[test]
    fn ray_depths_are_sorted_and_bounded(near in 0.05..2.0f64, span in 0.0..20.0f64, n in 1usize..64, seed in any::<u64>(), stratified in any::<bool>()) {
        let far = near + span;
        prop_assume!(n == 1 || span > 0.0);
        let d = sample_ray_depths(near, far, n, stratified, seed).unwrap();
        prop_assert_eq!(d.len(), n);
        prop_assert!(d.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(d.iter().all(|&x| x >= near * (1.0 - 1e-12) && x <= far * (1.0 + 1e-12)));
    }

    #[test]
    fn frustum_overlap_is_symmetric_and_bounded(seed in any::<u64>(), shift in 0.0..3.0f64, angle in 0.0..1.5f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = CameraIntrinsics::from_fov(24, 16, 1.1).unwrap();
        let e1 = CameraExtrinsics::from_yaw_pitch(Vec3::new(0.0, 1.5, 0.0), 0.3, 0.1);
        let c1 = nvs_contrast::geometry::Camera::new(k.clone(), e1.clone());
        let e2 = nearby_camera(&c1, shift, angle, &mut rng).extrinsics;
        let ab = frustum_overlap(&e1, &e2, &k, 0.1, 5.0).unwrap();
        let ba = frustum_overlap(&e2, &e1, &k, 0.1, 5.0).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!((frustum_overlap(&e1, &e1, &k, 0.1, 5.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn camera_distance_is_a_symmetric_premetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_camera(&mut rng).extrinsics;
        let b = random_camera(&mut rng).extrinsics;
        prop_assert!((camera_distance(&a, &b) - camera_distance(&b, &a)).abs() < 1e-9);
        prop_assert!(camera_distance(&a, &a).abs() < 1e-6);
        prop_assert!(camera_distance(&a, &b) >= 0.0);
    }
}

#[test]
fn frustum_volume_matches_the_pyramid_formula() {
    let k = CameraIntrinsics::from_focal(20.0, 10.0, 7.5, 5.5, 16, 12).unwrap();
    let e = CameraExtrinsics::identity();
    let f = Frustum::new(&k, &e, 1.0, 3.0).unwrap();
    // Image plane at unit depth spans 16/20 by 12/10.
    let base = (16.0 / 20.0) * (12.0 / 10.0);
    let exact = base * (27.0 - 1.0) / 3.0;
    assert!((f.volume() - exact).abs() < 1e-9);
    assert!((frustum_volume(&k, 1.0, 3.0) - exact).abs() < 1e-9);
}

#[test]
fn disjoint_frustums_do_not_overlap() {
    let k = CameraIntrinsics::from_fov(16, 16, 0.8).unwrap();
    let a = CameraExtrinsics::from_yaw_pitch(Vec3::zeros(), 0.0, 0.0);
    let b = CameraExtrinsics::from_yaw_pitch(Vec3::new(0.0, 0.0, -1.0), std::f64::consts::PI, 0.0);
    assert_eq!(frustum_overlap(&a, &b, &k, 0.1, 3.0).unwrap(), 0.0);
}

#[test]
fn fractions_and_bounds() {
    assert_eq!(even_fractions(3), vec![0.0, 0.5, 1.0]);
    assert_eq!(midpoint_fractions(4), vec![0.125, 0.375, 0.625, 0.875]);
    let d = depths_at_fractions(1.0, 4.0, &[0.0, 0.5, 1.0]);
    assert!((d[0] - 1.0).abs() < 1e-15 && (d[1] - 1.6).abs() < 1e-12 && (d[2] - 4.0).abs() < 1e-12);
    assert!(sample_ray_depths(2.0, 1.0, 4, false, 0).is_err());
    let cam = random_camera(&mut ChaCha8Rng::seed_from_u64(3));
    assert!(ray_through_pixel(Pixel::new(-1.0, 0.0), &cam).is_err());
    assert!(ray_through_pixel(Pixel::new(0.0, 0.0), &cam).is_ok());
}
