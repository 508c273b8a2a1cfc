use nalgebra::{Rotation3, Unit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{render_ground_truth, select_views, ProceduralScene, RoomPoseSampler, SelectionConfig};
use crate::error::{Error, Result};
use crate::frame::CameraView;
use crate::geometry::{Camera, CameraExtrinsics, CameraIntrinsics, Vec3};

/// Posed views of one procedural scene.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePack {
    pub scene: ProceduralScene,
    pub views: Vec<CameraView>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackConfig {
    pub width: usize,
    pub height: usize,
    pub fov_x: f64,
    pub n_views: usize,
    pub n_primitives: usize,
    pub selection: SelectionConfig,
}

impl Default for PackConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            fov_x: 1.2,
            n_views: 12,
            n_primitives: 6,
            selection: SelectionConfig {
                n_views: 12,
                ..Default::default()
            },
        }
    }
}

/// Selects `cfg.n_views` cameras and renders quantized RGB (8-bit levels) and
/// `f32`-rounded depth, so the in-memory pack equals its on-disk form.
pub fn build_pack(scene: ProceduralScene, cfg: &PackConfig, seed: u64) -> Result<ScenePack> {
    let k = CameraIntrinsics::from_fov(cfg.width, cfg.height, cfg.fov_x)?;
    let sel = SelectionConfig {
        n_views: cfg.n_views,
        ..cfg.selection.clone()
    };
    let mut sampler = RoomPoseSampler::new(&scene, seed);
    let poses = select_views(&scene, &mut sampler, &k, &sel)?;
    let views = poses
        .into_iter()
        .map(|e| {
            let camera = Camera::new(k.clone(), e);
            let (mut image, mut depth) = render_ground_truth(&scene, &camera);
            image.quantize();
            depth.round_to_f32();
            CameraView {
                camera,
                image,
                depth: Some(depth),
            }
        })
        .collect();
    Ok(ScenePack { scene, views })
}

/// Seed of scene `index` in a set generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64)
}

/// `n_scenes` packs from consecutive scene seeds; with `noise`, each pack is
/// also made realish.
pub fn generate_packs(
    n_scenes: usize,
    cfg: &PackConfig,
    noise: Option<RealishNoise>,
    seed: u64,
) -> Result<Vec<ScenePack>> {
    (0..n_scenes)
        .map(|i| {
            let s = scene_seed(seed, i);
            let pack = build_pack(super::generate_scene(s, cfg.n_primitives)?, cfg, s)?;
            match noise {
                Some(n) => make_realish(&pack, n, s ^ 0x00ea_115b),
                None => Ok(pack),
            }
        })
        .collect()
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Ray bounds from the 0.5 and 99.5 percentiles of finite ground-truth depth,
/// padded by 5%.
pub fn depth_bounds(pack: &ScenePack) -> Result<(f64, f64)> {
    let mut all: Vec<f64> = pack
        .views
        .iter()
        .filter_map(|v| v.depth.as_ref())
        .flat_map(|d| d.data().iter().copied().filter(|x| x.is_finite()))
        .collect();
    if all.is_empty() {
        return Err(Error::invalid("scene has no finite ground-truth depth"));
    }
    all.sort_by(f64::total_cmp);
    let near = percentile(&all, 0.005) * 0.95;
    let far = percentile(&all, 0.995) * 1.05;
    Ok((near, far.max(near * 1.01)))
}

/// Nuisance model for "real-like" captures: camera pose error, sensor noise
/// and per-view illumination gain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealishNoise {
    /// Std of the center offset (world units) and rotation angle (radians).
    pub pose_sigma: f64,
    pub image_sigma: f64,
    /// Gains are drawn uniformly from `[1 - g, 1 + g]`.
    pub gain_jitter: f64,
}

impl Default for RealishNoise {
    fn default() -> Self {
        Self {
            pose_sigma: 0.005,
            image_sigma: 2.0 / 255.0,
            gain_jitter: 0.1,
        }
    }
}

/// Perturbs stored poses and images. Depth maps stay those of the true poses.
pub fn make_realish(pack: &ScenePack, noise: RealishNoise, seed: u64) -> Result<ScenePack> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pose = Normal::new(0.0, noise.pose_sigma.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let pix = Normal::new(0.0, noise.image_sigma.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut out = pack.clone();
    for view in &mut out.views {
        let e = &view.camera.extrinsics;
        let offset = Vec3::new(pose.sample(&mut rng), pose.sample(&mut rng), pose.sample(&mut rng));
        let axis = Vec3::new(
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
        );
        let angle = pose.sample(&mut rng);
        let rot = if axis.norm() > 1e-9 {
            Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner()
        } else {
            nalgebra::Matrix3::identity()
        };
        let jittered = CameraExtrinsics::new(rot * e.rotation(), e.center() + offset)?;
        view.camera = Camera::new(view.camera.intrinsics.clone(), jittered);
        let gain = 1.0 + rng.random_range(-noise.gain_jitter..=noise.gain_jitter);
        for v in view.image.data_mut() {
            *v = *v * gain + pix.sample(&mut rng);
        }
        view.image.quantize();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::generate_scene;

    fn small() -> PackConfig {
        PackConfig {
            width: 16,
            height: 16,
            n_views: 4,
            ..Default::default()
        }
    }

    #[test]
    fn pack_is_deterministic_and_bounded() {
        let a = build_pack(generate_scene(1, 4).unwrap(), &small(), 3).unwrap();
        let b = build_pack(generate_scene(1, 4).unwrap(), &small(), 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.views.len(), 4);
        let (near, far) = depth_bounds(&a).unwrap();
        assert!(near > 0.0 && far > near);
    }

    #[test]
    fn realish_changes_poses_and_pixels_but_not_depth() {
        let a = build_pack(generate_scene(1, 4).unwrap(), &small(), 3).unwrap();
        let r = make_realish(&a, RealishNoise::default(), 9).unwrap();
        for (x, y) in a.views.iter().zip(&r.views) {
            assert_ne!(x.camera, y.camera);
            assert_ne!(x.image, y.image);
            assert_eq!(x.depth, y.depth);
            assert!((x.camera.center() - y.camera.center()).norm() < 0.05);
        }
    }
}
