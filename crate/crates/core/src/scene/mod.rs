//! Procedural indoor scenes with analytic RGB-D ground truth, and camera view
//! selection by frustum overlap and pose distance.

mod frustum;
mod pack;
mod select;

pub use frustum::{frustum_overlap, frustum_volume, Frustum};
pub use pack::{
    build_pack, depth_bounds, generate_packs, make_realish, scene_seed, PackConfig, RealishNoise, ScenePack,
};
pub use select::{select_views, PoseSampler, RoomPoseSampler, SelectionConfig};

pub use crate::geometry::camera_distance;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{DepthMap, Image, Pixel};
use crate::geometry::{pixel_ray, Camera, Ray, Vec3};

/// Color of pixels whose ray hits nothing.
pub const BACKGROUND: [f64; 3] = [0.5, 0.5, 0.5];
const AMBIENT: f64 = 0.35;
const HIT_EPS: f64 = 1e-9;

/// Direction towards the fixed directional light.
pub fn light_direction() -> Vec3 {
    Vec3::new(0.4, 1.0, 0.3).normalize()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn min_v(&self) -> Vec3 {
        Vec3::from(self.min)
    }

    pub fn max_v(&self) -> Vec3 {
        Vec3::from(self.max)
    }

    pub fn diagonal(&self) -> f64 {
        (self.max_v() - self.min_v()).norm()
    }

    pub fn contains(&self, p: &Vec3, margin: f64) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] - margin && p[i] <= self.max[i] + margin)
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        (0..3).all(|i| other.min[i] >= self.min[i] && other.max[i] <= self.max[i])
    }

    /// Entry and exit ray parameters, if the slab intervals overlap.
    fn slab(&self, ray: &Ray) -> Option<(f64, f64, usize, usize)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        let (mut a0, mut a1) = (0, 0);
        for i in 0..3 {
            let d = ray.direction[i];
            let o = ray.origin[i];
            if d.abs() < 1e-300 {
                if o < self.min[i] || o > self.max[i] {
                    return None;
                }
                continue;
            }
            let (mut lo, mut hi) = ((self.min[i] - o) / d, (self.max[i] - o) / d);
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            if lo > t0 {
                t0 = lo;
                a0 = i;
            }
            if hi < t1 {
                t1 = hi;
                a1 = i;
            }
        }
        (t0 <= t1).then_some((t0, t1, a0, a1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
        albedo: [f64; 3],
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
        albedo: [f64; 3],
    },
}

/// Surface hit along a ray.
#[derive(Clone, Copy, Debug)]
pub struct Hit {
    pub depth: f64,
    pub normal: Vec3,
    pub albedo: [f64; 3],
}

impl Primitive {
    pub fn albedo(&self) -> [f64; 3] {
        match self {
            Primitive::Box { albedo, .. } | Primitive::Sphere { albedo, .. } => *albedo,
        }
    }

    pub fn bounds(&self) -> Aabb {
        match self {
            Primitive::Box {
                center, half_extents, ..
            } => Aabb {
                min: [0, 1, 2].map(|i| center[i] - half_extents[i]),
                max: [0, 1, 2].map(|i| center[i] + half_extents[i]),
            },
            Primitive::Sphere { center, radius, .. } => Aabb {
                min: center.map(|c| c - radius),
                max: center.map(|c| c + radius),
            },
        }
    }

    /// Unsigned distance from `p` to the primitive's surface.
    pub fn surface_distance(&self, p: &Vec3) -> f64 {
        match self {
            Primitive::Sphere { center, radius, .. } => ((p - Vec3::from(*center)).norm() - radius).abs(),
            Primitive::Box {
                center, half_extents, ..
            } => {
                let q = (p - Vec3::from(*center)).abs() - Vec3::from(*half_extents);
                let outside = q.map(|v| v.max(0.0)).norm();
                let inside = q.x.max(q.y).max(q.z).min(0.0);
                (outside + inside).abs()
            }
        }
    }

    pub fn intersect(&self, ray: &Ray) -> Option<Hit> {
        match self {
            Primitive::Box { albedo, .. } => {
                let (t0, _t1, axis, _) = self.bounds().slab(ray)?;
                if t0 <= HIT_EPS {
                    return None;
                }
                let mut normal = Vec3::zeros();
                normal[axis] = -ray.direction[axis].signum();
                Some(Hit {
                    depth: t0,
                    normal,
                    albedo: *albedo,
                })
            }
            Primitive::Sphere { center, radius, albedo } => {
                let c = Vec3::from(*center);
                let oc = ray.origin - c;
                let a = ray.direction.norm_squared();
                let b = oc.dot(&ray.direction);
                let cc = oc.norm_squared() - radius * radius;
                let disc = b * b - a * cc;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = [(-b - sq) / a, (-b + sq) / a].into_iter().find(|&t| t > HIT_EPS)?;
                let normal = (ray.at(t) - c) / *radius;
                Some(Hit {
                    depth: t,
                    normal,
                    albedo: *albedo,
                })
            }
        }
    }
}

/// A room (axis-aligned box, optionally rendered as an inward-facing shell)
/// furnished with boxes and spheres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProceduralScene {
    pub primitives: Vec<Primitive>,
    pub room_bounds: Aabb,
    pub seed: u64,
    /// Albedo of the room faces in order -x, +x, floor, ceiling, -z, +z;
    /// `None` leaves the room open.
    #[serde(default)]
    pub shell: Option<[[f64; 3]; 6]>,
}

fn random_albedo(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [0, 1, 2].map(|_| rng.random_range(0.15..0.95))
}

/// Deterministic procedural scene for `seed` with `n_primitives` objects.
pub fn generate_scene(seed: u64, n_primitives: usize) -> Result<ProceduralScene> {
    if n_primitives < 1 {
        return Err(Error::invalid("a scene needs at least one primitive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5_ce0e_5eed);
    let half_x = rng.random_range(2.0..3.0);
    let half_z = rng.random_range(2.0..3.0);
    let height = rng.random_range(2.5..3.0);
    let room = Aabb {
        min: [-half_x, 0.0, -half_z],
        max: [half_x, height, half_z],
    };
    let mut primitives = Vec::with_capacity(n_primitives);
    for _ in 0..n_primitives {
        let albedo = random_albedo(&mut rng);
        let prim = if rng.random_bool(0.6) {
            let he = [0, 1, 2].map(|_| rng.random_range(0.15..0.6));
            let x = rng.random_range(room.min[0] + he[0]..room.max[0] - he[0]);
            let z = rng.random_range(room.min[2] + he[2]..room.max[2] - he[2]);
            let y = if rng.random_bool(0.7) {
                he[1]
            } else {
                rng.random_range(he[1]..1.8)
            };
            Primitive::Box {
                center: [x, y, z],
                half_extents: he,
                albedo,
            }
        } else {
            let r: f64 = rng.random_range(0.15..0.5);
            let x = rng.random_range(room.min[0] + r..room.max[0] - r);
            let z = rng.random_range(room.min[2] + r..room.max[2] - r);
            let y = rng.random_range(r..1.8);
            Primitive::Sphere {
                center: [x, y, z],
                radius: r,
                albedo,
            }
        };
        primitives.push(prim);
    }
    let shell = Some([0; 6].map(|_| {
        let g: f64 = rng.random_range(0.35..0.85);
        let tint: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(-0.08..0.08));
        [0, 1, 2].map(|i| (g + tint[i]).clamp(0.0, 1.0))
    }));
    Ok(ProceduralScene {
        primitives,
        room_bounds: room,
        seed,
        shell,
    })
}

impl ProceduralScene {
    fn shell_hit(&self, ray: &Ray) -> Option<Hit> {
        let albedos = self.shell?;
        let (t0, t1, a0, a1) = self.room_bounds.slab(ray)?;
        let (t, axis) = if t0 > HIT_EPS {
            (t0, a0)
        } else if t1 > HIT_EPS {
            (t1, a1)
        } else {
            return None;
        };
        let p = ray.at(t);
        let mid = 0.5 * (self.room_bounds.min[axis] + self.room_bounds.max[axis]);
        let upper = p[axis] > mid;
        let face = axis * 2 + usize::from(upper);
        let mut normal = Vec3::zeros();
        normal[axis] = -ray.direction[axis].signum();
        Some(Hit {
            depth: t,
            normal,
            albedo: albedos[face],
        })
    }

    /// Closest surface along the ray.
    pub fn trace(&self, ray: &Ray) -> Option<Hit> {
        let mut best: Option<Hit> = self.shell_hit(ray);
        for prim in &self.primitives {
            if let Some(h) = prim.intersect(ray) {
                if best.is_none_or(|b| h.depth < b.depth) {
                    best = Some(h);
                }
            }
        }
        best
    }

    /// Lambertian shading under the fixed light, independent of view direction.
    pub fn shade(hit: &Hit) -> [f64; 3] {
        let lambert = hit.normal.dot(&light_direction()).max(0.0);
        let k = AMBIENT + (1.0 - AMBIENT) * lambert;
        hit.albedo.map(|a| (a * k).clamp(0.0, 1.0))
    }

    /// Distance from `p` to the nearest surface (primitives and shell).
    pub fn surface_distance(&self, p: &Vec3) -> f64 {
        let mut best = self
            .primitives
            .iter()
            .map(|s| s.surface_distance(p))
            .fold(f64::INFINITY, f64::min);
        if self.shell.is_some() {
            let shell = Primitive::Box {
                center: [0, 1, 2].map(|i| 0.5 * (self.room_bounds.min[i] + self.room_bounds.max[i])),
                half_extents: [0, 1, 2].map(|i| 0.5 * (self.room_bounds.max[i] - self.room_bounds.min[i])),
                albedo: [0.0; 3],
            };
            best = best.min(shell.surface_distance(p));
        }
        best
    }

    /// Whether `p` lies inside (or within `margin` of) any primitive.
    pub fn is_occupied(&self, p: &Vec3, margin: f64) -> bool {
        self.primitives.iter().any(|s| match s {
            Primitive::Sphere { center, radius, .. } => (p - Vec3::from(*center)).norm() <= radius + margin,
            Primitive::Box { .. } => s.bounds().contains(p, margin),
        })
    }
}

/// Analytic ray-cast image and z-depth map. Misses get [`BACKGROUND`] and
/// infinite depth.
pub fn render_ground_truth(scene: &ProceduralScene, cam: &Camera) -> (Image, DepthMap) {
    let (w, h) = (cam.width(), cam.height());
    let mut image = Image::filled(w, h, BACKGROUND);
    let mut depth = vec![f64::INFINITY; w * h];
    for y in 0..h {
        for x in 0..w {
            let ray = pixel_ray(Pixel::new(x as f64, y as f64), cam);
            if let Some(hit) = scene.trace(&ray) {
                image.set(x, y, ProceduralScene::shade(&hit));
                depth[y * w + x] = hit.depth;
            }
        }
    }
    (image, DepthMap::new(w, h, depth).expect("sized"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraExtrinsics, CameraIntrinsics};

    #[test]
    fn generate_scene_basics() {
        let s = generate_scene(0, 1).unwrap();
        assert_eq!(s.primitives.len(), 1);
        assert!(s.room_bounds.contains_box(&s.primitives[0].bounds()));
        assert!(generate_scene(0, 0).is_err());
        let a = serde_json::to_string(&generate_scene(0, 5).unwrap()).unwrap();
        let b = serde_json::to_string(&generate_scene(0, 5).unwrap()).unwrap();
        let c = serde_json::to_string(&generate_scene(1, 5).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn primitives_are_inside_the_room_for_many_seeds() {
        for seed in 0..50 {
            let s = generate_scene(seed, 8).unwrap();
            for p in &s.primitives {
                assert!(s.room_bounds.contains_box(&p.bounds()), "seed {seed}: {p:?}");
            }
        }
    }

    #[test]
    fn sphere_on_axis_has_analytic_center_depth() {
        let scene = ProceduralScene {
            primitives: vec![Primitive::Sphere {
                center: [0.0, 0.0, 5.0],
                radius: 1.0,
                albedo: [0.8, 0.2, 0.2],
            }],
            room_bounds: Aabb {
                min: [-10.0; 3],
                max: [10.0; 3],
            },
            seed: 0,
            shell: None,
        };
        let cam = Camera::new(
            CameraIntrinsics::from_focal(20.0, 20.0, 8.0, 8.0, 17, 17).unwrap(),
            CameraExtrinsics::identity(),
        );
        let (img, depth) = render_ground_truth(&scene, &cam);
        assert!((depth.get(8, 8) - 4.0).abs() < 1e-12);
        assert!(depth.get(0, 0).is_infinite());
        assert_eq!(img.get(0, 0), BACKGROUND);
    }

    #[test]
    fn camera_facing_away_sees_background() {
        let scene = generate_scene(3, 4).unwrap();
        let outside = Vec3::new(0.0, 1.0, scene.room_bounds.max[2] + 1.0);
        let cam = Camera::new(
            CameraIntrinsics::from_fov(8, 8, 1.0).unwrap(),
            CameraExtrinsics::from_yaw_pitch(outside, 0.0, 0.0),
        );
        let (img, depth) = render_ground_truth(&scene, &cam);
        assert!(depth.data().iter().all(|d| d.is_infinite()));
        assert!(img.data().chunks(3).all(|c| c == BACKGROUND));
    }
}
