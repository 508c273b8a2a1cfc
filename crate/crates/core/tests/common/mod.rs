#![allow(dead_code)]

use nalgebra::Rotation3;
use rand::Rng;

use nvs_contrast::features::AttentionConfig;
use nvs_contrast::geometry::{Camera, CameraExtrinsics, CameraIntrinsics, Vec3};
use nvs_contrast::model::ModelConfig;
use nvs_contrast::scene::{build_pack, generate_scene, PackConfig, ScenePack};

pub fn random_rotation(rng: &mut impl Rng) -> nalgebra::Matrix3<f64> {
    let r = Rotation3::from_euler_angles(
        rng.random_range(-3.1..3.1),
        rng.random_range(-1.5..1.5),
        rng.random_range(-3.1..3.1),
    );
    r.into_inner()
}

/// Camera with random size, focal lengths, principal point and pose.
pub fn random_camera(rng: &mut impl Rng) -> Camera {
    let w = rng.random_range(8..=160);
    let h = rng.random_range(8..=160);
    let fx = rng.random_range(0.4..2.5) * w as f64;
    let fy = fx * rng.random_range(0.8..1.25);
    let cx = rng.random_range(-0.5..w as f64 - 0.5);
    let cy = rng.random_range(-0.5..h as f64 - 0.5);
    let k = CameraIntrinsics::from_focal(fx, fy, cx, cy, w, h).unwrap();
    let c = Vec3::new(
        rng.random_range(-5.0..5.0),
        rng.random_range(-5.0..5.0),
        rng.random_range(-5.0..5.0),
    );
    Camera::new(k, CameraExtrinsics::new(random_rotation(rng), c).unwrap())
}

/// A camera near `cam`, sharing its intrinsics, rotated by up to `max_angle`
/// about a random axis and moved by up to `max_shift`.
pub fn nearby_camera(cam: &Camera, max_shift: f64, max_angle: f64, rng: &mut impl Rng) -> Camera {
    let axis = nalgebra::Unit::new_normalize(Vec3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ));
    let rot = Rotation3::from_axis_angle(&axis, rng.random_range(-max_angle..=max_angle)).into_inner();
    let shift = Vec3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ) * max_shift;
    let e = CameraExtrinsics::new(rot * cam.extrinsics.rotation(), cam.center() + shift).unwrap();
    Camera::new(cam.intrinsics.clone(), e)
}

/// Very small networks for gradient checks.
pub fn tiny_model_config() -> ModelConfig {
    let mut c = ModelConfig::default();
    c.features.widths = [4, 6, 8];
    c.features.attention = AttentionConfig {
        n_heads: 2,
        inner_dim: 4,
        n_epipolar_keys: 4,
        ..Default::default()
    };
    c.render.hidden = 8;
    c.render.token_dim = 4;
    c.render.n_coarse = 6;
    c.render.n_fine = 6;
    c.contrast.n_pixels = 8;
    c.contrast.n_neg = 8;
    c
}

pub fn small_packs(n_scenes: u64, n_views: usize, size: usize) -> Vec<ScenePack> {
    let pc = PackConfig {
        width: size,
        height: size,
        n_views,
        ..Default::default()
    };
    (0..n_scenes)
        .map(|s| build_pack(generate_scene(s, 6).unwrap(), &pc, s).unwrap())
        .collect()
}

/// Central difference of `f` at `x`.
pub fn central_difference(f: &mut dyn FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// `|a − n| / max(|a|, |n|)`, zero when both vanish.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}
