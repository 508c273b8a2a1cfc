//! Casts a ray through a pixel, projects its samples into a second view and
//! measures how well the frustums of the two cameras overlap.

use nvs_contrast::frame::Pixel;
use nvs_contrast::geometry::{
    camera_distance, epipolar_projections, pixel_ray, project_point, Camera, CameraExtrinsics, CameraIntrinsics, Vec3,
};
use nvs_contrast::scene::frustum_overlap;

fn main() -> nvs_contrast::Result<()> {
    let k = CameraIntrinsics::from_fov(64, 48, 1.2)?;
    let a = CameraExtrinsics::look_at(Vec3::new(0.0, 1.5, -3.0), Vec3::new(0.0, 1.0, 0.0))?;
    let b = CameraExtrinsics::look_at(Vec3::new(0.8, 1.6, -2.8), Vec3::new(0.0, 1.0, 0.0))?;
    let (cam_a, cam_b) = (Camera::new(k.clone(), a.clone()), Camera::new(k.clone(), b.clone()));

    let u = Pixel::new(40.0, 20.0);
    let ray = pixel_ray(u, &cam_a);
    let p = ray.at(2.5);
    let back = project_point(&p, &cam_a);
    println!(
        "pixel {u:?} -> point {p:?} -> pixel {:?} at depth {:.6}",
        back.pixel, back.depth
    );

    let line = epipolar_projections(u, &cam_a, &cam_b, 8, 0.5, 8.0, 0)?;
    println!("epipolar samples in the second view:");
    for ((d, proj), ok) in line.depths.iter().zip(&line.projections).zip(&line.valid) {
        println!(
            "  depth {d:6.3} -> ({:7.2}, {:7.2}) {}",
            proj.pixel.x,
            proj.pixel.y,
            if *ok { "" } else { "(off image)" }
        );
    }

    println!("pose distance {:.4}", camera_distance(&a, &b));
    println!("frustum overlap {:.4}", frustum_overlap(&a, &b, &k, 0.5, 8.0)?);
    Ok(())
}
