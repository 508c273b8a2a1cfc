use nvs_contrast::geometry::{CameraExtrinsics, CameraIntrinsics, Vec3};
use nvs_contrast::scene::{
    camera_distance, frustum_overlap, generate_scene, select_views, PoseSampler, RoomPoseSampler, SelectionConfig,
};
use nvs_contrast::Error;

fn check_contract(views: &[CameraExtrinsics], k: &CameraIntrinsics, cfg: &SelectionConfig, far: f64) {
    assert_eq!(views.len(), cfg.n_views);
    for i in 1..views.len() {
        let prefix = &views[..i];
        let dist = prefix
            .iter()
            .map(|a| camera_distance(&views[i], a))
            .fold(f64::INFINITY, f64::min);
        assert!(
            dist >= cfg.distance_threshold,
            "view {i} is {dist} from an earlier view"
        );
        let overlap = prefix
            .iter()
            .map(|a| frustum_overlap(&views[i], a, k, cfg.near, far).unwrap())
            .fold(0.0, f64::max);
        assert!(overlap >= cfg.overlap_threshold, "view {i} overlaps at most {overlap}");
    }
}

#[test]
fn selection_satisfies_thresholds_and_is_deterministic() {
    let scene = generate_scene(9, 5).unwrap();
    let k = CameraIntrinsics::from_fov(32, 32, 1.2).unwrap();
    let cfg = SelectionConfig {
        n_views: 30,
        ..Default::default()
    };
    let a = select_views(&scene, &mut RoomPoseSampler::new(&scene, 1), &k, &cfg).unwrap();
    let b = select_views(&scene, &mut RoomPoseSampler::new(&scene, 1), &k, &cfg).unwrap();
    let c = select_views(&scene, &mut RoomPoseSampler::new(&scene, 2), &k, &cfg).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    check_contract(&a, &k, &cfg, scene.room_bounds.diagonal());
}

#[test]
fn stricter_thresholds_still_hold() {
    let scene = generate_scene(4, 3).unwrap();
    let k = CameraIntrinsics::from_fov(24, 18, 1.0).unwrap();
    let cfg = SelectionConfig {
        n_views: 12,
        overlap_threshold: 0.5,
        distance_threshold: 0.6,
        far: Some(6.0),
        ..Default::default()
    };
    let v = select_views(&scene, &mut RoomPoseSampler::new(&scene, 7), &k, &cfg).unwrap();
    check_contract(&v, &k, &cfg, 6.0);
}

/// Always proposes the same pose, so nothing after the first is accepted.
struct Stuck;

impl PoseSampler for Stuck {
    fn propose(&mut self) -> CameraExtrinsics {
        CameraExtrinsics::from_yaw_pitch(Vec3::new(0.0, 1.5, 0.0), 0.0, 0.0)
    }
}

#[test]
fn exhausted_budget_is_reported() {
    let scene = generate_scene(1, 2).unwrap();
    let k = CameraIntrinsics::from_fov(16, 16, 1.0).unwrap();
    let cfg = SelectionConfig {
        n_views: 3,
        max_proposals: 50,
        ..Default::default()
    };
    match select_views(&scene, &mut Stuck, &k, &cfg) {
        Err(Error::SelectionBudget {
            proposals,
            accepted,
            requested,
        }) => {
            assert_eq!((proposals, accepted, requested), (50, 1, 3));
        }
        other => panic!("expected a budget error, got {other:?}"),
    }
    let one = SelectionConfig { n_views: 1, ..cfg };
    assert_eq!(select_views(&scene, &mut Stuck, &k, &one).unwrap().len(), 1);
}

#[test]
fn sampled_poses_avoid_primitives() {
    let scene = generate_scene(3, 8).unwrap();
    let mut sampler = RoomPoseSampler::new(&scene, 5);
    for _ in 0..500 {
        let e = sampler.propose();
        assert!(!scene.is_occupied(e.center(), sampler.clearance));
        assert!(scene.room_bounds.contains(e.center(), 0.0));
    }
}
