//! Selects a view set for one procedural scene and reports how far apart and
//! how overlapping the accepted cameras are.

use nvs_contrast::geometry::CameraIntrinsics;
use nvs_contrast::scene::{
    camera_distance, frustum_overlap, generate_scene, select_views, RoomPoseSampler, SelectionConfig,
};

fn main() -> nvs_contrast::Result<()> {
    let scene = generate_scene(5, 6)?;
    let k = CameraIntrinsics::from_fov(64, 48, 1.2)?;
    let cfg = SelectionConfig {
        n_views: 20,
        ..Default::default()
    };
    let views = select_views(&scene, &mut RoomPoseSampler::new(&scene, 1), &k, &cfg)?;
    let far = cfg.far.unwrap_or_else(|| scene.room_bounds.diagonal());
    for (i, v) in views.iter().enumerate().skip(1) {
        let nearest = views[..i]
            .iter()
            .map(|a| camera_distance(v, a))
            .fold(f64::INFINITY, f64::min);
        let overlap = views[..i]
            .iter()
            .map(|a| frustum_overlap(v, a, &k, cfg.near, far))
            .collect::<nvs_contrast::Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        println!("view {i:2}: nearest earlier pose {nearest:.3}, best overlap {overlap:.3}");
    }
    println!(
        "thresholds: distance >= {}, overlap >= {}",
        cfg.distance_threshold, cfg.overlap_threshold
    );
    Ok(())
}
