//! Pinhole cameras, rays, projections and epipolar sampling.
//!
//! Conventions: the camera frame has +x right, +y down and +z forward.
//! Extrinsics are camera-to-world (`R`, `t` with `t` the camera center), so a
//! pixel `u` lifts to the ray `t + δ R K⁻¹ [u, 1]ᵀ` and a world point `p`
//! projects through `d [v, 1]ᵀ = K Rᵀ (p − t)`. Because the third entry of
//! `K⁻¹ [u, 1]ᵀ` is 1, the ray parameter `δ` is the z-depth of the point.
//! Integer pixel coordinates are pixel centers.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frame::{DepthLookup, DepthMap, Pixel};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Points with `|d|` below this are treated as lying in the camera plane.
pub const MIN_DEPTH: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct CameraIntrinsics {
    k: Mat3,
    k_inv: Mat3,
    width: usize,
    height: usize,
}

impl CameraIntrinsics {
    pub fn new(k: Mat3, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image size must be positive"));
        }
        let lower_ok = k[(1, 0)] == 0.0 && k[(2, 0)] == 0.0 && k[(2, 1)] == 0.0;
        if !lower_ok || k[(2, 2)] != 1.0 {
            return Err(Error::invalid("K must be upper-triangular with K[2,2] = 1"));
        }
        if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        let (cx, cy) = (k[(0, 2)], k[(1, 2)]);
        if !(-0.5..=width as f64 - 0.5).contains(&cx) || !(-0.5..=height as f64 - 0.5).contains(&cy) {
            return Err(Error::invalid("principal point outside the image"));
        }
        let k_inv = k.try_inverse().ok_or_else(|| Error::invalid("K is singular"))?;
        Ok(Self {
            k,
            k_inv,
            width,
            height,
        })
    }

    pub fn from_focal(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(Mat3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0), width, height)
    }

    /// Square pixels, centered principal point, horizontal field of view in radians.
    pub fn from_fov(width: usize, height: usize, fov_x: f64) -> Result<Self> {
        let f = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self::from_focal(
            f,
            f,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn k(&self) -> &Mat3 {
        &self.k
    }

    pub fn k_inv(&self) -> &Mat3 {
        &self.k_inv
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Whether `p` lies on the image (pixel areas of the border pixels included).
    pub fn contains(&self, p: Pixel) -> bool {
        p.x >= -0.5 && p.y >= -0.5 && p.x < self.width as f64 - 0.5 && p.y < self.height as f64 - 0.5
    }

    pub fn clamp(&self, p: Pixel) -> Pixel {
        Pixel::new(
            p.x.clamp(0.0, (self.width - 1) as f64),
            p.y.clamp(0.0, (self.height - 1) as f64),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraExtrinsics {
    rotation: Mat3,
    center: Vec3,
}

impl CameraExtrinsics {
    pub fn new(rotation: Mat3, center: Vec3) -> Result<Self> {
        let orth = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        if orth > 1e-6 || (rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("rotation must be orthonormal with det 1"));
        }
        Ok(Self { rotation, center })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            center: Vec3::zeros(),
        }
    }

    /// Camera at `center` looking along yaw (about world +y, 0 = +z) and pitch
    /// (positive looks up), with world +y up.
    pub fn from_yaw_pitch(center: Vec3, yaw: f64, pitch: f64) -> Self {
        let forward = Vec3::new(pitch.cos() * yaw.sin(), pitch.sin(), pitch.cos() * yaw.cos());
        let right = forward.cross(&Vec3::y()).normalize();
        let down = forward.cross(&right);
        let rotation = Mat3::from_columns(&[right, down, forward]);
        Self { rotation, center }
    }

    /// Camera at `center` whose optical axis points at `target`.
    pub fn look_at(center: Vec3, target: Vec3) -> Result<Self> {
        let d = target - center;
        if d.norm() < 1e-12 {
            return Err(Error::invalid("look_at target equals the camera center"));
        }
        let d = d.normalize();
        let pitch = d.y.clamp(-1.0, 1.0).asin();
        let yaw = d.x.atan2(d.z);
        if pitch.cos() < 1e-9 {
            return Err(Error::invalid("look_at direction is vertical"));
        }
        Ok(Self::from_yaw_pitch(center, yaw, pitch))
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn center(&self) -> &Vec3 {
        &self.center
    }

    pub fn forward(&self) -> Vec3 {
        self.rotation.column(2).into_owned()
    }

    pub fn translated(&self, delta: Vec3) -> Self {
        Self {
            rotation: self.rotation,
            center: self.center + delta,
        }
    }
}

/// Intrinsics plus camera-to-world pose.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
}

impl Camera {
    pub fn new(intrinsics: CameraIntrinsics, extrinsics: CameraExtrinsics) -> Self {
        Self { intrinsics, extrinsics }
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn center(&self) -> Vec3 {
        self.extrinsics.center
    }
}

/// `origin + δ · direction`, with `direction` un-normalized (unit camera z).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, depth: f64) -> Vec3 {
        self.origin + self.direction * depth
    }
}

/// Ray through pixel `u` (unchecked bounds).
pub fn pixel_ray(u: Pixel, cam: &Camera) -> Ray {
    let local = cam.intrinsics.k_inv * Vec3::new(u.x, u.y, 1.0);
    Ray {
        origin: cam.extrinsics.center,
        direction: cam.extrinsics.rotation * local,
    }
}

pub fn ray_through_pixel(u: Pixel, cam: &Camera) -> Result<Ray> {
    if !cam.intrinsics.contains(u) {
        return Err(Error::invalid(format!(
            "pixel ({}, {}) outside a {}x{} image",
            u.x,
            u.y,
            cam.width(),
            cam.height()
        )));
    }
    Ok(pixel_ray(u, cam))
}

/// Projection of a world point: pixel plus signed z-depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub pixel: Pixel,
    pub depth: f64,
}

impl Projection {
    /// In front of the camera and on the image.
    pub fn is_visible_in(&self, cam: &Camera) -> bool {
        self.depth > MIN_DEPTH && cam.intrinsics.contains(self.pixel)
    }
}

/// Pinhole projection. For `|depth| < MIN_DEPTH` the pixel is not finite and
/// callers must reject the point.
pub fn project_point(p: &Vec3, cam: &Camera) -> Projection {
    let local = cam.extrinsics.rotation.transpose() * (p - cam.extrinsics.center);
    let h = cam.intrinsics.k * local;
    let depth = h.z;
    Projection {
        pixel: Vector2::new(h.x / depth, h.y / depth),
        depth,
    }
}

/// Depths uniform in inverse depth at the given fractions in `[0, 1]`
/// (0 maps to `near`, 1 to `far`).
pub fn depths_at_fractions(near: f64, far: f64, fractions: &[f64]) -> Vec<f64> {
    let (a, b) = (1.0 / near, 1.0 / far);
    fractions.iter().map(|&f| 1.0 / (a + (b - a) * f)).collect()
}

/// Evenly spaced fractions including both endpoints.
pub fn even_fractions(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|s| s as f64 / (n - 1) as f64).collect()
}

/// The midpoint of each of `n` equal strata.
pub fn midpoint_fractions(n: usize) -> Vec<f64> {
    (0..n).map(|s| (s as f64 + 0.5) / n as f64).collect()
}

/// One jittered fraction per stratum `[s/n, (s+1)/n)`.
pub fn stratified_fractions(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|s| (s as f64 + rng.random::<f64>()) / n as f64).collect()
}

fn check_range(near: f64, far: f64, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::invalid("need at least one depth sample"));
    }
    if !(near > 0.0 && near.is_finite() && far.is_finite()) {
        return Err(Error::invalid(format!("invalid depth range [{near}, {far}]")));
    }
    if far < near || (far == near && n > 1) {
        return Err(Error::invalid(format!("invalid depth range [{near}, {far}]")));
    }
    Ok(())
}

/// Ascending depths in `[near, far]`, uniform in `1/δ`. Deterministic sampling
/// includes both endpoints; stratified sampling jitters within equal strata.
pub fn sample_ray_depths(near: f64, far: f64, n: usize, stratified: bool, seed: u64) -> Result<Vec<f64>> {
    check_range(near, far, n)?;
    let fractions = if stratified {
        stratified_fractions(n, &mut ChaCha8Rng::seed_from_u64(seed))
    } else {
        even_fractions(n)
    };
    Ok(depths_at_fractions(near, far, &fractions))
}

/// Samples along the ray of pixel `u` in view `i`, projected into view `j`.
#[derive(Clone, Debug)]
pub struct EpipolarSamples {
    pub depths: Vec<f64>,
    pub points: Vec<Vec3>,
    pub projections: Vec<Projection>,
    pub valid: Vec<bool>,
}

/// Projects the given ray depths of `u` in `cam_i` into `cam_j`.
pub fn epipolar_at_depths(u: Pixel, cam_i: &Camera, cam_j: &Camera, depths: &[f64]) -> EpipolarSamples {
    let ray = pixel_ray(u, cam_i);
    let points: Vec<Vec3> = depths.iter().map(|&d| ray.at(d)).collect();
    let projections: Vec<Projection> = points.iter().map(|p| project_point(p, cam_j)).collect();
    let valid = projections.iter().map(|p| p.is_visible_in(cam_j)).collect();
    EpipolarSamples {
        depths: depths.to_vec(),
        points,
        projections,
        valid,
    }
}

pub fn epipolar_projections(
    u: Pixel,
    cam_i: &Camera,
    cam_j: &Camera,
    n_samples: usize,
    near: f64,
    far: f64,
    seed: u64,
) -> Result<EpipolarSamples> {
    if !cam_i.intrinsics.contains(u) {
        return Err(Error::invalid("pixel outside the source image"));
    }
    let depths = sample_ray_depths(near, far, n_samples, true, seed)?;
    Ok(epipolar_at_depths(u, cam_i, cam_j, &depths))
}

/// Positive correspondence of `p` (view `i`) in view `j`, or `None` when the
/// surface point is occluded, off-image or behind camera `j`.
pub fn make_positive_pair(
    p: Pixel,
    cam_i: &Camera,
    cam_j: &Camera,
    depth_i: &DepthMap,
    depth_j: &DepthMap,
    eps_rel: f64,
    lookup: DepthLookup,
) -> Option<Pixel> {
    let d_p = depth_i.lookup(p, lookup);
    if !d_p.is_finite() || d_p <= 0.0 {
        return None;
    }
    let p3 = pixel_ray(p, cam_i).at(d_p);
    let proj = project_point(&p3, cam_j);
    if !proj.is_visible_in(cam_j) {
        return None;
    }
    let observed = depth_j.lookup(proj.pixel, lookup);
    if !observed.is_finite() || (proj.depth - observed).abs() > eps_rel * proj.depth {
        return None;
    }
    Some(proj.pixel)
}

/// Redraws allowed per invalid negative before clamping to the image.
pub const NEGATIVE_RETRIES: usize = 8;

/// `n_neg` epipolar negatives of `p` in view `j`: projections of ray samples
/// drawn uniformly in inverse depth (stratified). Off-image samples are redrawn
/// up to [`NEGATIVE_RETRIES`] times, then clamped onto the image.
pub fn make_negative_pairs(
    p: Pixel,
    cam_i: &Camera,
    cam_j: &Camera,
    n_neg: usize,
    near: f64,
    far: f64,
    rng: &mut impl Rng,
) -> Vec<Pixel> {
    let ray = pixel_ray(p, cam_i);
    let fractions = stratified_fractions(n_neg, rng);
    let mut out = Vec::with_capacity(n_neg);
    for f in fractions {
        let mut proj = project_point(&ray.at(depths_at_fractions(near, far, &[f])[0]), cam_j);
        let mut tries = 0;
        while !proj.is_visible_in(cam_j) && tries < NEGATIVE_RETRIES {
            let f: f64 = rng.random();
            proj = project_point(&ray.at(depths_at_fractions(near, far, &[f])[0]), cam_j);
            tries += 1;
        }
        let pixel = if proj.pixel.x.is_finite() && proj.pixel.y.is_finite() {
            proj.pixel
        } else {
            Pixel::new(0.0, 0.0)
        };
        out.push(cam_j.intrinsics.clamp(pixel));
    }
    out
}

/// Uniform random integer pixels of view `j`; the non-geometric negative
/// sampling baseline.
pub fn random_negative_pairs(cam_j: &Camera, n_neg: usize, rng: &mut impl Rng) -> Vec<Pixel> {
    (0..n_neg)
        .map(|_| {
            Pixel::new(
                rng.random_range(0..cam_j.width()) as f64,
                rng.random_range(0..cam_j.height()) as f64,
            )
        })
        .collect()
}

/// Distance between camera poses: center distance plus the rotation angle
/// between the two orientations.
pub fn camera_distance(a: &CameraExtrinsics, b: &CameraExtrinsics) -> f64 {
    let trace = (b.rotation.transpose() * a.rotation).trace();
    let cos = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0);
    (a.center - b.center).norm() + cos.acos()
}
