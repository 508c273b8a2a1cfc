//! Color and density prediction from source views and softmax accumulation
//! along rays.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{Linear, Mlp};
use crate::autodiff::{ParamStore, RowMap, Session, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::{AttentionMode, Grid, Mha};
use crate::frame::{CameraView, Image};
use crate::geometry::{depths_at_fractions, even_fractions, project_point, stratified_fractions, Camera, Ray};
use crate::scene::BACKGROUND;

/// Density assigned to samples no source view sees.
pub const INVALID_SIGMA: f64 = -10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderNetConfig {
    pub hidden: usize,
    pub token_dim: usize,
    pub ray_layers: usize,
    pub ray_heads: usize,
    pub n_coarse: usize,
    pub n_fine: usize,
    /// Use one set of weights for both passes.
    pub share_fine: bool,
}

impl Default for RenderNetConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            token_dim: 16,
            ray_layers: 1,
            ray_heads: 1,
            n_coarse: 64,
            n_fine: 64,
            share_fine: false,
        }
    }
}

impl RenderNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(Error::Config {
                key: key.into(),
                message,
            })
        };
        if self.hidden == 0 || self.token_dim == 0 {
            return bad("hidden", "network widths must be positive".into());
        }
        if self.ray_heads == 0 || !self.token_dim.is_multiple_of(self.ray_heads) {
            return bad(
                "ray_heads",
                format!("token_dim {} is not divisible by {}", self.token_dim, self.ray_heads),
            );
        }
        if self.n_coarse == 0 {
            return bad("n_coarse", "must be at least 1".into());
        }
        Ok(())
    }
}

/// Per-(ray, sample, view) inputs to the render network, ordered with the
/// view index fastest.
#[derive(Clone, Debug)]
pub struct PointSamples {
    pub n_rays: usize,
    pub n_samples: usize,
    pub n_views: usize,
    /// Bilinear taps into the render feature grid.
    pub features: Arc<RowMap>,
    /// `[rows, 3]` bilinear source colors.
    pub rgb: Tensor,
    /// `[rows, 4]`: unit ray direction minus unit source direction, and their dot product.
    pub direction: Tensor,
    pub valid: Vec<bool>,
}

impl PointSamples {
    pub fn rows(&self) -> usize {
        self.n_rays * self.n_samples * self.n_views
    }

    /// Samples seen by at least one view.
    pub fn sample_valid(&self) -> Vec<bool> {
        self.valid.chunks(self.n_views).map(|c| c.iter().any(|&v| v)).collect()
    }
}

/// Projects every ray sample into every source view and gathers features,
/// colors and viewing-direction offsets there. A view is invalid for a
/// sample behind it or off its image.
pub fn point_features(
    rays: &[Ray],
    depths: &[Vec<f64>],
    cameras: &[&Camera],
    images: &[&Image],
    grid: Grid,
) -> Result<PointSamples> {
    if cameras.len() != images.len() || cameras.len() != grid.n_views {
        return Err(Error::Shape(format!(
            "{} cameras, {} images, {} feature views",
            cameras.len(),
            images.len(),
            grid.n_views
        )));
    }
    if rays.len() != depths.len() {
        return Err(Error::Shape(format!(
            "{} rays with {} depth lists",
            rays.len(),
            depths.len()
        )));
    }
    let n_samples = depths.first().map_or(0, Vec::len);
    if depths.iter().any(|d| d.len() != n_samples) || n_samples == 0 {
        return Err(Error::Shape(
            "every ray needs the same positive number of samples".into(),
        ));
    }
    let v = cameras.len();
    let rows = rays.len() * n_samples * v;
    let mut map = RowMap::with_capacity(grid.rows(), rows, rows * 4);
    let mut rgb = Tensor::zeros(rows, 3);
    let mut dir = Tensor::zeros(rows, 4);
    let mut valid = Vec::with_capacity(rows);
    let mut r = 0;
    for (ray, ds) in rays.iter().zip(depths) {
        let d_ray = ray.direction.normalize();
        for &d in ds {
            let p = ray.at(d);
            for (k, (cam, im)) in cameras.iter().zip(images).enumerate() {
                let proj = project_point(&p, cam);
                if proj.is_visible_in(cam) {
                    map.push_row(grid.stencil(k, proj.pixel));
                    rgb.row_mut(r).copy_from_slice(&im.bilinear(proj.pixel));
                    let d_src = (p - cam.center()).normalize();
                    let delta = d_ray - d_src;
                    dir.row_mut(r)
                        .copy_from_slice(&[delta.x, delta.y, delta.z, d_ray.dot(&d_src)]);
                    valid.push(true);
                } else {
                    map.push_empty();
                    valid.push(false);
                }
                r += 1;
            }
        }
    }
    Ok(PointSamples {
        n_rays: rays.len(),
        n_samples,
        n_views: v,
        features: Arc::new(map),
        rgb,
        direction: dir,
        valid,
    })
}

/// Predicted per-sample quantities of one pass.
pub struct SampleOutput {
    /// `[rays * samples, 3]`.
    pub colors: Var,
    /// `[rays * samples, 1]`.
    pub sigma: Var,
    /// `[rays * samples * views, 1]` blend weights.
    pub blend: Var,
    pub sample_valid: Vec<bool>,
}

/// Set aggregation over source views followed by a ray transformer over
/// samples.
#[derive(Clone, Debug)]
pub struct RenderNet {
    embed: Mlp,
    mix: Mlp,
    blend: Linear,
    token: Linear,
    attn: Vec<Mha>,
    ff: Vec<Linear>,
    sigma: Linear,
}

fn masked_pool(valid: &[bool], group: usize) -> RowMap {
    let n_groups = valid.len() / group;
    let mut m = RowMap::with_capacity(valid.len(), n_groups, valid.len());
    for g in 0..n_groups {
        let part = &valid[g * group..(g + 1) * group];
        let n = part.iter().filter(|&&v| v).count();
        if n == 0 {
            m.push_empty();
        } else {
            m.push_row((0..group).filter(|&k| part[k]).map(|k| (g * group + k, 1.0 / n as f64)));
        }
    }
    m
}

fn indicator(flags: &[bool]) -> Tensor {
    Tensor::column(flags.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect())
}

impl RenderNet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        feature_dim: usize,
        cfg: &RenderNetConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        let d = cfg.token_dim;
        let embed = Mlp::new(store, rng, &format!("{name}.embed"), &[feature_dim + 7, h, h]);
        let mix = Mlp::new(store, rng, &format!("{name}.mix"), &[3 * h, h, h]);
        let blend = Linear::new(store, rng, &format!("{name}.blend"), h, 1, false, true);
        let token = Linear::new(store, rng, &format!("{name}.token"), 2 * h, d, true, true);
        let mut attn = Vec::new();
        let mut ff = Vec::new();
        for l in 0..cfg.ray_layers {
            attn.push(Mha::new(
                store,
                rng,
                &format!("{name}.ray{l}"),
                d,
                cfg.ray_heads,
                AttentionMode::DotProduct,
            ));
            ff.push(Linear::new(store, rng, &format!("{name}.ray{l}.ff"), d, d, true, true));
        }
        let sigma = Linear::new(store, rng, &format!("{name}.sigma"), d, 1, false, true);
        Ok(Self {
            embed,
            mix,
            blend,
            token,
            attn,
            ff,
            sigma,
        })
    }

    /// Names of one weight per block, used by gradient probes.
    pub fn probe_parameters(&self) -> Vec<String> {
        let mut v = vec![
            self.embed.layers()[0].weight_name().to_string(),
            self.blend.weight_name().to_string(),
            self.token.weight_name().to_string(),
        ];
        v.extend(self.ff.iter().map(|l| l.weight_name().to_string()));
        v.push(self.sigma.weight_name().to_string());
        v
    }

    pub fn forward(&self, s: &mut Session, features: Var, pts: &PointSamples) -> SampleOutput {
        let (v, n_s) = (pts.n_views, pts.n_samples);
        let g = pts.n_rays * n_s;
        let view_mask = Arc::new(pts.valid.clone());
        let sample_valid = pts.sample_valid();

        let f = s.graph.rows(features, pts.features.clone());
        let rgb = s.constant(pts.rgb.clone());
        let dir = s.constant(pts.direction.clone());
        let x = s.graph.concat_cols(&[f, rgb, dir]);
        let h1 = self.embed.forward(s, x);
        let h1 = s.graph.relu(h1);

        let pool = Arc::new(masked_pool(&pts.valid, v));
        let spread = Arc::new(RowMap::repeat_each(g, v));
        let mean = s.graph.rows(h1, pool.clone());
        let mean = s.graph.rows(mean, spread.clone());
        let diff = s.graph.sub(h1, mean);
        let sq = s.graph.mul(diff, diff);
        let var = s.graph.rows(sq, pool);
        let var = s.graph.rows(var, spread.clone());
        let cat = s.graph.concat_cols(&[h1, mean, var]);
        let h2 = self.mix.forward(s, cat);
        let h2 = s.graph.relu(h2);

        let logits = self.blend.forward(s, h2);
        let blend = s.graph.group_softmax(logits, v, Some(view_mask));
        let sum = Arc::new(RowMap::group_sum(g, v));
        let weighted = s.graph.mul_col(rgb, blend);
        let colors = s.graph.rows(weighted, sum.clone());
        let mut bg = Tensor::zeros(g, 3);
        for (r, &ok) in sample_valid.iter().enumerate() {
            if !ok {
                bg.row_mut(r).copy_from_slice(&BACKGROUND);
            }
        }
        let bg = s.constant(bg);
        let colors = s.graph.add(colors, bg);

        let wh = s.graph.mul_col(h2, blend);
        let wmean = s.graph.rows(wh, sum.clone());
        let wmean_rep = s.graph.rows(wmean, spread);
        let wdiff = s.graph.sub(h2, wmean_rep);
        let wsq = s.graph.mul(wdiff, wdiff);
        let wsq = s.graph.mul_col(wsq, blend);
        let wvar = s.graph.rows(wsq, sum);
        let stats = s.graph.concat_cols(&[wmean, wvar]);
        let tok = self.token.forward(s, stats);
        let mut tok = s.graph.relu(tok);

        let mut keys = RowMap::with_capacity(g, g * n_s, g * n_s);
        for r in 0..pts.n_rays {
            for _ in 0..n_s {
                for k in 0..n_s {
                    keys.push_select(r * n_s + k);
                }
            }
        }
        let keys = Arc::new(keys);
        let mut key_mask = Vec::with_capacity(g * n_s);
        for r in 0..pts.n_rays {
            for _ in 0..n_s {
                key_mask.extend_from_slice(&sample_valid[r * n_s..(r + 1) * n_s]);
            }
        }
        let key_mask = Arc::new(key_mask);
        for (mha, ff) in self.attn.iter().zip(&self.ff) {
            let a = mha.forward_selected(s, tok, tok, keys.clone(), n_s, Some(key_mask.clone()));
            let t = s.graph.add(tok, a.out);
            let t = ff.forward(s, t);
            tok = s.graph.relu(t);
        }
        let sigma = self.sigma.forward(s, tok);
        let keep = s.constant(indicator(&sample_valid));
        let sigma = s.graph.mul_col(sigma, keep);
        let fill = s.constant(Tensor::column(
            sample_valid
                .iter()
                .map(|&ok| if ok { 0.0 } else { INVALID_SIGMA })
                .collect(),
        ));
        let sigma = s.graph.add(sigma, fill);
        SampleOutput {
            colors,
            sigma,
            blend,
            sample_valid,
        }
    }
}

/// `Ĉ = Σ c e^σ / Σ e^σ` per ray, with the normalized weights.
pub fn accumulate_softmax(s: &mut Session, colors: Var, sigma: Var, n_samples: usize) -> (Var, Var) {
    let g = s.graph.shape(sigma).0;
    let w = s.graph.group_softmax(sigma, n_samples, None);
    let wc = s.graph.mul_col(colors, w);
    let c = s.graph.rows(wc, Arc::new(RowMap::group_sum(g / n_samples, n_samples)));
    (c, w)
}

/// Plain-number form of [`accumulate_softmax`] for one ray.
pub fn accumulate_softmax_values(colors: &[[f64; 3]], sigma: &[f64]) -> Result<([f64; 3], Vec<f64>)> {
    if colors.len() != sigma.len() || sigma.is_empty() {
        return Err(Error::Shape(format!(
            "{} colors for {} densities",
            colors.len(),
            sigma.len()
        )));
    }
    let mx = sigma.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = sigma.iter().map(|x| (x - mx).exp()).collect();
    let total: f64 = e.iter().sum();
    let w: Vec<f64> = e.iter().map(|x| x / total).collect();
    let mut c = [0.0; 3];
    for (wi, ci) in w.iter().zip(colors) {
        for k in 0..3 {
            c[k] += wi * ci[k];
        }
    }
    Ok((c, w))
}

/// Draws `n_fine` depths by inverse transform sampling of the piecewise
/// constant density that puts mass `w_k` on a bin around `depths[k]`. Bin
/// edges are the midpoints between neighbors; the outer bins extend half a
/// spacing beyond the first and last depth. `seed = None` uses evenly spaced
/// quantiles. Returns the fine depths sorted.
pub fn fine_resample(weights: &[f64], depths: &[f64], n_fine: usize, seed: Option<u64>) -> Result<Vec<f64>> {
    if weights.len() != depths.len() || depths.is_empty() {
        return Err(Error::Shape(format!(
            "{} weights for {} depths",
            weights.len(),
            depths.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::invalid("weights must be non-negative"));
    }
    let n = depths.len();
    if n == 1 {
        return Ok(vec![depths[0]; n_fine]);
    }
    let mut edges = Vec::with_capacity(n + 1);
    edges.push((depths[0] - 0.5 * (depths[1] - depths[0])).max(0.5 * depths[0]));
    for k in 0..n - 1 {
        edges.push(0.5 * (depths[k] + depths[k + 1]));
    }
    edges.push(depths[n - 1] + 0.5 * (depths[n - 1] - depths[n - 2]));
    let total: f64 = weights.iter().sum();
    let pdf: Vec<f64> = if total > 0.0 {
        weights.iter().map(|w| w / total).collect()
    } else {
        vec![1.0 / n as f64; n]
    };
    let mut cdf = Vec::with_capacity(n + 1);
    cdf.push(0.0);
    for p in &pdf {
        cdf.push(cdf.last().unwrap() + p);
    }
    let us: Vec<f64> = match seed {
        Some(seed) => stratified_fractions(n_fine, &mut ChaCha8Rng::seed_from_u64(seed)),
        None => (0..n_fine).map(|k| (k as f64 + 0.5) / n_fine as f64).collect(),
    };
    let mut out: Vec<f64> = us
        .into_iter()
        .map(|u| {
            let u = u * cdf[n];
            let mut k = cdf.partition_point(|&c| c <= u).saturating_sub(1).min(n - 1);
            while pdf[k] == 0.0 && k + 1 < n && cdf[k + 1] <= u {
                k += 1;
            }
            let t = if pdf[k] > 0.0 {
                ((u - cdf[k]) / pdf[k]).clamp(0.0, 1.0)
            } else {
                0.5
            };
            edges[k] + t * (edges[k + 1] - edges[k])
        })
        .collect();
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Sorted union of two depth lists.
pub fn merge_depths(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut m: Vec<f64> = a.iter().chain(b).copied().collect();
    m.sort_by(f64::total_cmp);
    m
}

/// Mean over rays of `‖Ĉc − C‖² + ‖Ĉf − C‖²`.
pub fn color_loss(s: &mut Session, coarse: Var, fine: Var, target: &Tensor) -> Result<Var> {
    let shape = s.graph.shape(coarse);
    if shape != s.graph.shape(fine) || shape != target.shape() || shape.1 != 3 {
        return Err(Error::Shape(format!(
            "coarse {:?}, fine {:?}, target {:?}",
            shape,
            s.graph.shape(fine),
            target.shape()
        )));
    }
    let t = s.constant(target.clone());
    let dc = s.graph.sub(coarse, t);
    let df = s.graph.sub(fine, t);
    let sc = s.graph.mul(dc, dc);
    let sf = s.graph.mul(df, df);
    let total = s.graph.add(sc, sf);
    let sum = s.graph.sum_all(total);
    Ok(s.graph.scale(sum, 1.0 / shape.0 as f64))
}

#[derive(Clone, Debug)]
pub struct Renderer {
    pub config: RenderNetConfig,
    pub coarse: RenderNet,
    pub fine: RenderNet,
}

/// Result of rendering a batch of rays through both passes.
pub struct RenderedRays {
    pub coarse: Var,
    pub fine: Var,
    pub coarse_weights: Var,
    pub fine_weights: Var,
    pub coarse_depths: Vec<Vec<f64>>,
    pub fine_depths: Vec<Vec<f64>>,
    pub fine_sigma: Var,
    /// Rays with at least one sample seen by a source view.
    pub ray_valid: Vec<bool>,
}

/// How ray depths are drawn.
#[derive(Clone, Copy, Debug)]
pub enum Sampling {
    /// Evenly spaced in inverse depth, quantile fine sampling.
    Deterministic,
    /// Stratified coarse and fine samples from this seed.
    Stratified(u64),
}

impl Renderer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        feature_dim: usize,
        config: RenderNetConfig,
    ) -> Result<Self> {
        let coarse = RenderNet::new(store, rng, "render.coarse", feature_dim, &config)?;
        let fine = if config.share_fine {
            coarse.clone()
        } else {
            RenderNet::new(store, rng, "render.fine", feature_dim, &config)?
        };
        Ok(Self { config, coarse, fine })
    }

    /// Coarse pass on `n_coarse` inverse-depth samples, then a fine pass on
    /// the coarse samples merged with `n_fine` resampled depths. Sampling
    /// positions carry no gradient.
    pub fn render(
        &self,
        s: &mut Session,
        features: Var,
        grid: Grid,
        sources: &[&CameraView],
        rays: &[Ray],
        near: f64,
        far: f64,
        sampling: Sampling,
    ) -> Result<RenderedRays> {
        let cameras: Vec<&Camera> = sources.iter().map(|v| &v.camera).collect();
        let images: Vec<&Image> = sources.iter().map(|v| &v.image).collect();
        let mut rng = match sampling {
            Sampling::Stratified(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
            Sampling::Deterministic => None,
        };
        let nc = self.config.n_coarse;
        let coarse_depths: Vec<Vec<f64>> = rays
            .iter()
            .map(|_| {
                let f = match rng.as_mut() {
                    Some(r) => stratified_fractions(nc, r),
                    None => even_fractions(nc),
                };
                depths_at_fractions(near, far, &f)
            })
            .collect();
        let pts = point_features(rays, &coarse_depths, &cameras, &images, grid)?;
        let out_c = self.coarse.forward(s, features, &pts);
        let (coarse, coarse_weights) = accumulate_softmax(s, out_c.colors, out_c.sigma, nc);
        let ray_valid: Vec<bool> = out_c.sample_valid.chunks(nc).map(|c| c.iter().any(|&v| v)).collect();

        let wv = s.value(coarse_weights).clone();
        let mut fine_depths = Vec::with_capacity(rays.len());
        for (r, cd) in coarse_depths.iter().enumerate() {
            let w = &wv.data()[r * nc..(r + 1) * nc];
            let seed = rng.as_mut().map(|g| g.random::<u64>());
            let fd = fine_resample(w, cd, self.config.n_fine, seed)?;
            fine_depths.push(merge_depths(cd, &fd));
        }
        let nf = nc + self.config.n_fine;
        let pts = point_features(rays, &fine_depths, &cameras, &images, grid)?;
        let out_f = self.fine.forward(s, features, &pts);
        let (fine, fine_weights) = accumulate_softmax(s, out_f.colors, out_f.sigma, nf);
        Ok(RenderedRays {
            coarse,
            fine,
            coarse_weights,
            fine_weights,
            coarse_depths,
            fine_depths,
            fine_sigma: out_f.sigma,
            ray_valid,
        })
    }
}
