use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{CameraView, Pixel};
use crate::geometry::{depths_at_fractions, midpoint_fractions, pixel_ray, Camera, Ray};
use crate::model::{nearest_views, Model};
use crate::scene::{depth_bounds, ScenePack};

/// Samples per ray for the depth diagnostics.
pub const DEPTH_SAMPLES: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityWeighting {
    /// Alpha compositing with transmittance.
    Volume,
    /// Softmax over densities.
    Softmax,
}

/// `w_s = (1 - e^{-σ_s}) e^{-Σ_{t<s} σ_t}`.
pub fn volume_weights(sigma: &[f64]) -> Vec<f64> {
    let mut acc = 0.0f64;
    sigma
        .iter()
        .map(|&s| {
            let w = -(-s).exp_m1() * (-acc).exp();
            acc += s;
            w
        })
        .collect()
}

/// `w_s = e^{σ_s} / Σ e^{σ_t}`, stabilized.
pub fn softmax_weights(sigma: &[f64]) -> Vec<f64> {
    let mx = sigma.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = sigma.iter().map(|s| (s - mx).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

pub fn weights(sigma: &[f64], mode: DensityWeighting) -> Vec<f64> {
    match mode {
        DensityWeighting::Volume => volume_weights(sigma),
        DensityWeighting::Softmax => softmax_weights(sigma),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthStats {
    pub d_hat: f64,
    pub deviation: f64,
    pub error: f64,
}

/// `D̂ = Σ w δ`, `S = (Σ w (δ − D̂)²)^½`, `E = |D̂ − D|`.
pub fn depth_stats(w: &[f64], depths: &[f64], gt: f64) -> Result<DepthStats> {
    if w.len() != depths.len() {
        return Err(Error::Shape(format!("{} weights for {} depths", w.len(), depths.len())));
    }
    if !gt.is_finite() {
        return Err(Error::invalid("ground-truth depth is not finite"));
    }
    let d_hat: f64 = w.iter().zip(depths).map(|(a, d)| a * d).sum();
    let var: f64 = w.iter().zip(depths).map(|(a, d)| a * (d - d_hat).powi(2)).sum();
    Ok(DepthStats {
        d_hat,
        deviation: var.max(0.0).sqrt(),
        error: (d_hat - gt).abs(),
    })
}

/// Per-ray densities at fixed depths.
pub trait DensityModel {
    /// `rays[k]` is the ray of a pixel of `pack.views[view]` whose
    /// ground-truth depth is `gt[k]`.
    fn densities(
        &self,
        pack: &ScenePack,
        view: usize,
        rays: &[Ray],
        gt: &[f64],
        depths: &[f64],
        bounds: (f64, f64),
    ) -> Result<Vec<Vec<f64>>>;
}

/// A trained model's fine network, fed by the nearest other views.
pub struct TrainedDensity<'a> {
    pub model: &'a Model,
    pub n_source_views: usize,
    pub chunk: usize,
}

impl DensityModel for TrainedDensity<'_> {
    fn densities(
        &self,
        pack: &ScenePack,
        view: usize,
        rays: &[Ray],
        _gt: &[f64],
        depths: &[f64],
        bounds: (f64, f64),
    ) -> Result<Vec<Vec<f64>>> {
        let idx = nearest_views(&pack.views, &pack.views[view].camera, Some(view), self.n_source_views);
        let sources: Vec<&CameraView> = idx.iter().map(|&i| &pack.views[i]).collect();
        self.model
            .fine_densities(&sources, rays, depths, bounds.0, bounds.1, self.chunk)
    }
}

/// Puts all softmax mass on the two samples bracketing the true depth, with
/// linear-interpolation weights, so the softmax depth equals the truth.
pub struct SpikeDensity;

/// Zero density everywhere.
pub struct UniformDensity;

const FLOOR: f64 = -1e3;

impl DensityModel for SpikeDensity {
    fn densities(
        &self,
        _: &ScenePack,
        _: usize,
        _: &[Ray],
        gt: &[f64],
        depths: &[f64],
        _: (f64, f64),
    ) -> Result<Vec<Vec<f64>>> {
        Ok(gt
            .iter()
            .map(|&d| {
                let mut sigma = vec![FLOOR; depths.len()];
                let k = depths.partition_point(|&x| x <= d);
                if k == 0 {
                    sigma[0] = 0.0;
                } else if k == depths.len() {
                    sigma[k - 1] = 0.0;
                } else {
                    let (a, b) = (depths[k - 1], depths[k]);
                    let t = (d - a) / (b - a);
                    sigma[k - 1] = (1.0 - t).ln().max(FLOOR);
                    sigma[k] = t.ln().max(FLOOR);
                }
                sigma
            })
            .collect())
    }
}

impl DensityModel for UniformDensity {
    fn densities(
        &self,
        _: &ScenePack,
        _: usize,
        _: &[Ray],
        gt: &[f64],
        depths: &[f64],
        _: (f64, f64),
    ) -> Result<Vec<Vec<f64>>> {
        Ok(vec![vec![0.0; depths.len()]; gt.len()])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Bins {
    Uniform {
        count: usize,
        lo: f64,
        hi: f64,
    },
    /// `count` bins over `[0, quantile of the data]`.
    Percentile {
        count: usize,
        quantile: f64,
    },
}

impl Default for Bins {
    fn default() -> Self {
        Bins::Percentile {
            count: 50,
            quantile: 0.99,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Values outside the range are counted in the nearest end bin.
    pub fn build(values: &[f64], bins: Bins) -> Result<Self> {
        let (count, lo, hi) = match bins {
            Bins::Uniform { count, lo, hi } => (count, lo, hi),
            Bins::Percentile { count, quantile } => {
                let mut sorted = values.to_vec();
                sorted.sort_by(f64::total_cmp);
                let hi = sorted
                    .get(((quantile.clamp(0.0, 1.0) * (sorted.len().max(1) - 1) as f64).round()) as usize)
                    .copied()
                    .unwrap_or(1.0);
                (count, 0.0, if hi > 0.0 { hi } else { 1.0 })
            }
        };
        if count == 0 || !(hi > lo) {
            return Err(Error::invalid(format!(
                "invalid histogram bins: {count} over [{lo}, {hi}]"
            )));
        }
        let width = (hi - lo) / count as f64;
        let edges = (0..=count).map(|k| lo + width * k as f64).collect();
        let mut counts = vec![0u64; count];
        for &v in values {
            let k = ((v - lo) / width).floor();
            let k = if k.is_nan() {
                0
            } else {
                (k.max(0.0) as usize).min(count - 1)
            };
            counts[k] += 1;
        }
        Ok(Self { edges, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count\n");
        for (k, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", self.edges[k], self.edges[k + 1], c));
        }
        s
    }
}

/// Deviation and error samples over all evaluated pixels.
#[derive(Clone, Debug, Default)]
pub struct DepthSamples {
    pub deviation: Vec<f64>,
    pub error: Vec<f64>,
    pub skipped_scenes: usize,
}

/// Evaluates `model` on every `pixel_stride`-th pixel with finite
/// ground-truth depth of every view, using [`DEPTH_SAMPLES`] samples at the
/// midpoints of equal inverse-depth strata between the scene's ray bounds, so
/// uniform weights represent a distribution uniform in inverse depth.
pub fn collect_depth_stats(
    model: &dyn DensityModel,
    packs: &[ScenePack],
    mode: DensityWeighting,
    pixel_stride: usize,
) -> Result<DepthSamples> {
    let mut out = DepthSamples::default();
    let stride = pixel_stride.max(1);
    for (si, pack) in packs.iter().enumerate() {
        if pack.views.iter().any(|v| v.depth.is_none()) {
            log::warn!("scene {si} lacks ground-truth depth; skipped");
            out.skipped_scenes += 1;
            continue;
        }
        let bounds = depth_bounds(pack)?;
        let depths = depths_at_fractions(bounds.0, bounds.1, &midpoint_fractions(DEPTH_SAMPLES));
        for (vi, view) in pack.views.iter().enumerate() {
            let gt_map = view.depth.as_ref().expect("checked above");
            let (rays, gt) = pixel_rays(&view.camera, gt_map, stride);
            if rays.is_empty() {
                continue;
            }
            let sig = model.densities(pack, vi, &rays, &gt, &depths, bounds)?;
            for (sigma, &d) in sig.iter().zip(&gt) {
                let st = depth_stats(&weights(sigma, mode), &depths, d)?;
                out.deviation.push(st.deviation);
                out.error.push(st.error);
            }
        }
    }
    Ok(out)
}

fn pixel_rays(cam: &Camera, gt: &crate::frame::DepthMap, stride: usize) -> (Vec<Ray>, Vec<f64>) {
    let mut rays = Vec::new();
    let mut d = Vec::new();
    for y in (0..gt.height()).step_by(stride) {
        for x in (0..gt.width()).step_by(stride) {
            let v = gt.get(x, y);
            if v.is_finite() {
                rays.push(pixel_ray(Pixel::new(x as f64, y as f64), cam));
                d.push(v);
            }
        }
    }
    (rays, d)
}
