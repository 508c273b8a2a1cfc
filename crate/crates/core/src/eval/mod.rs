//! Image metrics and depth-distribution diagnostics.

mod depth;
mod metrics;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

pub use depth::{
    collect_depth_stats, depth_stats, softmax_weights, volume_weights, weights, Bins, DensityModel, DensityWeighting,
    DepthSamples, DepthStats, Histogram, SpikeDensity, TrainedDensity, UniformDensity, DEPTH_SAMPLES,
};
pub use metrics::{mse, psnr, ssim, ImageMetric, Psnr, Ssim, PSNR_CAP};

use crate::error::Result;
use crate::frame::CameraView;
use crate::model::{nearest_views, Model};
use crate::scene::{depth_bounds, ScenePack};

/// Scores of one rendered view. `extra` holds pluggable metrics by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub scene: usize,
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
    #[serde(default)]
    pub extra: Vec<(String, f64)>,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub n_source_views: usize,
    /// Render only the first `n` views of each scene.
    pub views_per_scene: Option<usize>,
    pub chunk: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_source_views: 10,
            views_per_scene: None,
            chunk: 256,
        }
    }
}

/// Renders each selected view from its nearest other views and scores it.
pub fn evaluate(
    model: &Model,
    packs: &[ScenePack],
    opts: &EvalOptions,
    extra: &[&dyn ImageMetric],
) -> Result<Vec<ViewMetrics>> {
    let mut out = Vec::new();
    for (si, pack) in packs.iter().enumerate() {
        let (near, far) = depth_bounds(pack)?;
        let n = opts.views_per_scene.unwrap_or(pack.views.len()).min(pack.views.len());
        for vi in 0..n {
            let target = &pack.views[vi];
            let idx = nearest_views(&pack.views, &target.camera, Some(vi), opts.n_source_views);
            let sources: Vec<&CameraView> = idx.iter().map(|&i| &pack.views[i]).collect();
            let r = model.render_view(&target.camera, &sources, near, far, opts.chunk)?;
            let mut m = ViewMetrics {
                scene: si,
                view: vi,
                psnr: psnr(&r.image, &target.image)?,
                ssim: ssim(&r.image, &target.image)?,
                extra: Vec::new(),
            };
            for metric in extra {
                m.extra
                    .push((metric.name().to_string(), metric.evaluate(&r.image, &target.image)?));
            }
            out.push(m);
        }
    }
    Ok(out)
}

pub fn metrics_csv(rows: &[ViewMetrics]) -> String {
    let mut s = String::from("scene,view,psnr,ssim");
    if let Some(first) = rows.first() {
        for (name, _) in &first.extra {
            s.push(',');
            s.push_str(name);
        }
    }
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{},{}", r.scene, r.view, r.psnr, r.ssim));
        for (_, v) in &r.extra {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

pub fn mean_psnr_ssim(rows: &[ViewMetrics]) -> (f64, f64) {
    let n = rows.len().max(1) as f64;
    (
        rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        rows.iter().map(|r| r.ssim).sum::<f64>() / n,
    )
}

/// Bar chart of a histogram.
pub fn plot_histogram(h: &Histogram, width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let max = h.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let n = h.counts.len().max(1) as u32;
    let margin = 4;
    let plot_w = width.saturating_sub(2 * margin).max(n);
    let plot_h = height.saturating_sub(2 * margin).max(1);
    for (k, &c) in h.counts.iter().enumerate() {
        let x0 = margin + k as u32 * plot_w / n;
        let x1 = (margin + (k as u32 + 1) * plot_w / n).max(x0 + 1);
        let bar = ((c as f64 / max) * plot_h as f64).round() as u32;
        for x in x0..x1.saturating_sub(1).max(x0 + 1).min(width) {
            for y in (height - margin - bar)..(height - margin) {
                img.put_pixel(x, y, Rgb([40, 90, 160]));
            }
        }
    }
    for x in margin..width - margin {
        img.put_pixel(x, height - margin, Rgb([0, 0, 0]));
    }
    img
}

/// Deviation and error histograms of one model.
pub struct DepthHistograms {
    pub deviation: Histogram,
    pub error: Histogram,
    pub n_pixels: usize,
}

pub fn depth_histograms(samples: &DepthSamples, deviation_bins: Bins, error_bins: Bins) -> Result<DepthHistograms> {
    Ok(DepthHistograms {
        deviation: Histogram::build(&samples.deviation, deviation_bins)?,
        error: Histogram::build(&samples.error, error_bins)?,
        n_pixels: samples.error.len(),
    })
}
