use crate::error::{Error, Result};
use crate::frame::Pixel;
use crate::geometry::{pixel_ray, Camera, CameraExtrinsics, CameraIntrinsics, Vec3};

/// Viewing frustum of a camera between two z-depths, as a convex polyhedron.
#[derive(Clone, Debug)]
pub struct Frustum {
    faces: Vec<Vec<Vec3>>,
}

/// Half-space `n · x <= c`.
#[derive(Clone, Copy, Debug)]
struct HalfSpace {
    n: Vec3,
    c: f64,
}

impl HalfSpace {
    fn signed(&self, p: &Vec3) -> f64 {
        self.n.dot(p) - self.c
    }
}

fn centroid(points: &[Vec3]) -> Vec3 {
    points.iter().fold(Vec3::zeros(), |a, p| a + p) / points.len() as f64
}

impl Frustum {
    pub fn new(k: &CameraIntrinsics, e: &CameraExtrinsics, near: f64, far: f64) -> Result<Self> {
        if !(near > 0.0 && far > near && far.is_finite()) {
            return Err(Error::invalid(format!("invalid frustum depth range [{near}, {far}]")));
        }
        let cam = Camera::new(k.clone(), e.clone());
        let (w, h) = (k.width() as f64 - 0.5, k.height() as f64 - 0.5);
        let corners = [
            Pixel::new(-0.5, -0.5),
            Pixel::new(w, -0.5),
            Pixel::new(w, h),
            Pixel::new(-0.5, h),
        ];
        let at = |z: f64| -> Vec<Vec3> { corners.iter().map(|&c| pixel_ray(c, &cam).at(z)).collect() };
        let (n, f) = (at(near), at(far));
        let mut faces = vec![n.clone(), f.clone()];
        for i in 0..4 {
            let j = (i + 1) % 4;
            faces.push(vec![n[i], n[j], f[j], f[i]]);
        }
        Ok(Self { faces })
    }

    fn vertices(&self) -> Vec<Vec3> {
        self.faces.iter().flatten().copied().collect()
    }

    fn scale(&self) -> f64 {
        let v = self.vertices();
        let c = centroid(&v);
        v.iter().map(|p| (p - c).norm()).fold(0.0, f64::max)
    }

    fn half_spaces(&self) -> Vec<HalfSpace> {
        let interior = centroid(&self.vertices());
        self.faces
            .iter()
            .map(|f| {
                let c = centroid(f);
                let mut n = (f[1] - f[0]).cross(&(f[2] - f[0]));
                if n.norm() < 1e-300 {
                    n = (f[2] - f[1]).cross(&(f[3 % f.len()] - f[1]));
                }
                let mut n = n.normalize();
                if n.dot(&(interior - c)) > 0.0 {
                    n = -n;
                }
                HalfSpace { n, c: n.dot(&c) }
            })
            .collect()
    }

    /// Volume via a fan of tetrahedra from an interior point.
    pub fn volume(&self) -> f64 {
        polyhedron_volume(&self.faces)
    }
}

fn polyhedron_volume(faces: &[Vec<Vec3>]) -> f64 {
    let verts: Vec<Vec3> = faces.iter().flatten().copied().collect();
    if verts.is_empty() {
        return 0.0;
    }
    let o = centroid(&verts);
    let mut vol = 0.0;
    for f in faces {
        for i in 1..f.len().saturating_sub(1) {
            let (a, b, c) = (f[0] - o, f[i] - o, f[i + 1] - o);
            vol += a.dot(&b.cross(&c)).abs() / 6.0;
        }
    }
    vol
}

/// Clips a convex polyhedron (list of planar faces) to a half-space.
fn clip(faces: Vec<Vec<Vec3>>, hs: HalfSpace, tol: f64) -> Vec<Vec<Vec3>> {
    if faces.iter().flatten().all(|p| hs.signed(p) <= tol) {
        return faces;
    }
    let mut out = Vec::with_capacity(faces.len() + 1);
    let mut cap: Vec<Vec3> = Vec::new();
    for face in faces {
        let mut poly = Vec::with_capacity(face.len() + 2);
        for i in 0..face.len() {
            let (a, b) = (face[i], face[(i + 1) % face.len()]);
            let (da, db) = (hs.signed(&a), hs.signed(&b));
            let a_in = da <= tol;
            let b_in = db <= tol;
            if a_in {
                poly.push(a);
                if da.abs() <= tol {
                    cap.push(a);
                }
            }
            if a_in != b_in {
                let t = da / (da - db);
                let p = a + (b - a) * t;
                poly.push(p);
                cap.push(p);
            }
        }
        if poly.len() >= 3 {
            out.push(poly);
        }
    }
    if out.is_empty() {
        return out;
    }
    // Order the cap points around their centroid within the clip plane.
    let mut uniq: Vec<Vec3> = Vec::new();
    for p in cap {
        if !uniq.iter().any(|q| (q - p).norm() <= tol * 10.0) {
            uniq.push(p);
        }
    }
    if uniq.len() >= 3 {
        let c = centroid(&uniq);
        let helper = if hs.n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let e1 = hs.n.cross(&helper).normalize();
        let e2 = hs.n.cross(&e1);
        uniq.sort_by(|p, q| {
            let ap = (p - c).dot(&e2).atan2((p - c).dot(&e1));
            let aq = (q - c).dot(&e2).atan2((q - c).dot(&e1));
            ap.total_cmp(&aq)
        });
        out.push(uniq);
    }
    out
}

fn bounding_sphere(f: &Frustum) -> (Vec3, f64) {
    let v = f.vertices();
    let c = centroid(&v);
    (c, v.iter().map(|p| (p - c).norm()).fold(0.0, f64::max))
}

fn intersection_volume(a: &Frustum, b: &Frustum) -> f64 {
    let (ca, ra) = bounding_sphere(a);
    let (cb, rb) = bounding_sphere(b);
    if (ca - cb).norm() > ra + rb {
        return 0.0;
    }
    let tol = 1e-12 * a.scale().max(b.scale()).max(1.0);
    let mut faces = a.faces.clone();
    for hs in b.half_spaces() {
        faces = clip(faces, hs, tol);
        if faces.is_empty() {
            return 0.0;
        }
    }
    polyhedron_volume(&faces)
}

pub fn frustum_volume(k: &CameraIntrinsics, near: f64, far: f64) -> f64 {
    let (fx, fy) = (k.k()[(0, 0)], k.k()[(1, 1)]);
    (k.width() as f64 / fx) * (k.height() as f64 / fy) * (far.powi(3) - near.powi(3)) / 3.0
}

fn pose_key(e: &CameraExtrinsics) -> Vec<u64> {
    e.center()
        .iter()
        .chain(e.rotation().iter())
        .map(|v| v.to_bits())
        .collect()
}

/// Intersection-over-union of two camera frustums sharing intrinsics `k`,
/// computed by exact convex clipping.
pub fn frustum_overlap(
    e1: &CameraExtrinsics,
    e2: &CameraExtrinsics,
    k: &CameraIntrinsics,
    near: f64,
    far: f64,
) -> Result<f64> {
    let fa = Frustum::new(k, e1, near, far)?;
    if e1 == e2 {
        return Ok(1.0);
    }
    let fb = Frustum::new(k, e2, near, far)?;
    // Canonical argument order makes the result exactly symmetric.
    let (fa, fb) = if pose_key(e1) <= pose_key(e2) {
        (fa, fb)
    } else {
        (fb, fa)
    };
    let vol = frustum_volume(k, near, far);
    let inter = intersection_volume(&fa, &fb).min(vol);
    let union = 2.0 * vol - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::from_fov(32, 24, 1.2).unwrap()
    }

    #[test]
    fn clipped_volume_matches_analytic() {
        let e = CameraExtrinsics::from_yaw_pitch(Vec3::new(0.2, 1.0, -0.4), 0.7, 0.1);
        let f = Frustum::new(&k(), &e, 0.1, 5.0).unwrap();
        let analytic = frustum_volume(&k(), 0.1, 5.0);
        assert!((f.volume() - analytic).abs() < 1e-9 * analytic);
        let inter = intersection_volume(&f, &f);
        assert!((inter - analytic).abs() < 1e-6 * analytic);
    }

    #[test]
    fn identical_and_opposite_cameras() {
        let e = CameraExtrinsics::from_yaw_pitch(Vec3::new(0.0, 1.0, 0.0), 0.0, 0.0);
        assert_eq!(frustum_overlap(&e, &e, &k(), 0.1, 5.0).unwrap(), 1.0);
        let back = CameraExtrinsics::from_yaw_pitch(Vec3::new(0.0, 1.0, -0.01), std::f64::consts::PI, 0.0);
        assert_eq!(frustum_overlap(&e, &back, &k(), 0.1, 5.0).unwrap(), 0.0);
        assert!(frustum_overlap(&e, &back, &k(), 1.0, 0.5).is_err());
    }
}
