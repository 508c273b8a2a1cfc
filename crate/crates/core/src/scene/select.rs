use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{frustum_overlap, ProceduralScene};
use crate::error::{Error, Result};
use crate::geometry::{camera_distance, CameraExtrinsics, CameraIntrinsics, Vec3};

/// Source of candidate camera poses.
pub trait PoseSampler {
    fn propose(&mut self) -> CameraExtrinsics;
}

/// Uniform positions inside the room at eye height, uniform yaw and a small
/// pitch jitter. Positions inside (or too close to) a primitive are redrawn.
pub struct RoomPoseSampler<'a> {
    scene: &'a ProceduralScene,
    rng: ChaCha8Rng,
    pub eye_band: (f64, f64),
    pub pitch_jitter: f64,
    pub wall_margin: f64,
    pub clearance: f64,
}

impl<'a> RoomPoseSampler<'a> {
    pub fn new(scene: &'a ProceduralScene, seed: u64) -> Self {
        Self {
            scene,
            rng: ChaCha8Rng::seed_from_u64(seed),
            eye_band: (1.2, 1.8),
            pitch_jitter: 0.15,
            wall_margin: 0.3,
            clearance: 0.15,
        }
    }
}

impl PoseSampler for RoomPoseSampler<'_> {
    fn propose(&mut self) -> CameraExtrinsics {
        let b = self.scene.room_bounds;
        let top = (b.max[1] - self.wall_margin).max(self.eye_band.0 + 1e-3);
        let (lo, hi) = (self.eye_band.0, self.eye_band.1.min(top));
        loop {
            let p = Vec3::new(
                self.rng
                    .random_range(b.min[0] + self.wall_margin..b.max[0] - self.wall_margin),
                self.rng.random_range(lo..hi),
                self.rng
                    .random_range(b.min[2] + self.wall_margin..b.max[2] - self.wall_margin),
            );
            let yaw = self.rng.random_range(0.0..std::f64::consts::TAU);
            let pitch = self.rng.random_range(-self.pitch_jitter..=self.pitch_jitter);
            if !self.scene.is_occupied(&p, self.clearance) {
                return CameraExtrinsics::from_yaw_pitch(p, yaw, pitch);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub n_views: usize,
    pub overlap_threshold: f64,
    pub distance_threshold: f64,
    pub near: f64,
    /// `None` uses the room diagonal.
    pub far: Option<f64>,
    pub max_proposals: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            n_views: 200,
            overlap_threshold: 0.3,
            distance_threshold: 0.2,
            near: 0.1,
            far: None,
            max_proposals: 100_000,
        }
    }
}

/// Greedy camera view selection. The first proposal is accepted; afterwards
/// a proposal is accepted when its largest frustum overlap with the accepted
/// set reaches the overlap threshold and its smallest pose distance reaches
/// the distance threshold.
pub fn select_views(
    scene: &ProceduralScene,
    sampler: &mut dyn PoseSampler,
    k: &CameraIntrinsics,
    cfg: &SelectionConfig,
) -> Result<Vec<CameraExtrinsics>> {
    if cfg.n_views == 0 {
        return Err(Error::invalid("n_views must be positive"));
    }
    let far = cfg.far.unwrap_or_else(|| scene.room_bounds.diagonal());
    let mut accepted: Vec<CameraExtrinsics> = Vec::with_capacity(cfg.n_views);
    let mut proposals = 0;
    while accepted.len() < cfg.n_views {
        if proposals >= cfg.max_proposals {
            return Err(Error::SelectionBudget {
                proposals,
                accepted: accepted.len(),
                requested: cfg.n_views,
            });
        }
        proposals += 1;
        let e = sampler.propose();
        if accepted.is_empty() {
            accepted.push(e);
            continue;
        }
        let distance = accepted
            .iter()
            .map(|a| camera_distance(&e, a))
            .fold(f64::INFINITY, f64::min);
        if distance < cfg.distance_threshold {
            continue;
        }
        // The overlap is a max over the accepted set, so any single hit suffices.
        let mut overlaps = false;
        for a in &accepted {
            if frustum_overlap(&e, a, k, cfg.near, far)? >= cfg.overlap_threshold {
                overlaps = true;
                break;
            }
        }
        if overlaps {
            accepted.push(e);
        }
    }
    log::debug!("selected {} views from {} proposals", accepted.len(), proposals);
    Ok(accepted)
}
