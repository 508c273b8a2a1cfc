//! Optimization loop, dataset mixing and ablation arms.

use std::fmt;
use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, RowMap, Session, Tensor};
use crate::contrast::{build_contrast_batch, contrastive_loss, NegativeMode, WeightMode};
use crate::error::{Error, Result};
use crate::eval::{evaluate, mean_psnr_ssim, EvalOptions};
use crate::features::{AttentionMode, Grid};
use crate::frame::{CameraView, DepthLookup, DepthMap, Pixel};
use crate::geometry::{make_positive_pair, pixel_ray, Camera, Ray};
use crate::model::{nearest_views, Model, ModelConfig};
use crate::render::{color_loss, Sampling};
use crate::scene::{depth_bounds, ScenePack};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub rays_per_batch: usize,
    pub n_source_views: usize,
    pub contrast: bool,
    pub contrast_weight: f64,
    /// Source views that enter the contrastive loss, nearest first.
    pub contrast_views: usize,
    /// Supervise only target pixels whose surface a source view sees.
    pub visible_rays: bool,
    /// Fraction of realish scenes in a mixed training set.
    pub mix_ratio: f64,
    /// Held-out PSNR every `eval_every` iterations; 0 disables it.
    pub eval_every: usize,
    /// Held-out views per scene for the periodic PSNR.
    pub eval_views: usize,
    pub adam: AdamConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            rays_per_batch: 512,
            n_source_views: 10,
            contrast: true,
            contrast_weight: 1.0,
            contrast_views: 10,
            visible_rays: true,
            mix_ratio: 0.0,
            eval_every: 0,
            eval_views: 2,
            adam: AdamConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| Error::Config {
        key: key.into(),
        message: format!("cannot parse `{value}`: {e}"),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config {
            key: key.into(),
            message: format!("expected true or false, got `{value}`"),
        }),
    }
}

fn choice<T: Copy>(key: &str, value: &str, options: &[(&str, T)]) -> Result<T> {
    options
        .iter()
        .find(|(n, _)| *n == value)
        .map(|(_, v)| *v)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            Error::Config {
                key: key.into(),
                message: format!("`{value}` is not one of {}", names.join(", ")),
            }
        })
}

/// Parses `key = value` lines; `#` starts a comment. Returns pairs in file
/// order. Repeated keys are errors.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config {
                key: line.to_string(),
                message: format!("line {} is not `key = value`", n + 1),
            });
        };
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.is_empty() {
            return Err(Error::Config {
                key: String::new(),
                message: format!("line {} has an empty key", n + 1),
            });
        }
        if out.iter().any(|(e, _)| *e == k) {
            return Err(Error::Config {
                key: k,
                message: "appears more than once".into(),
            });
        }
        out.push((k, v));
    }
    Ok(out)
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "iterations",
        "base_lr",
        "beta1",
        "beta2",
        "adam_eps",
        "rays_per_batch",
        "n_source_views",
        "contrast",
        "contrast_weight",
        "contrast_views",
        "visible_rays",
        "negatives",
        "weighting",
        "attention",
        "mix_ratio",
        "eval_every",
        "eval_views",
        "widths",
        "n_heads",
        "inner_dim",
        "n_epipolar_keys",
        "attention_mode",
        "hidden",
        "token_dim",
        "ray_layers",
        "ray_heads",
        "n_coarse",
        "n_fine",
        "share_fine",
        "n_pixels",
        "n_neg",
        "tau_init",
        "tau_min",
        "tau_prime",
        "normalize_features",
        "eps_rel",
    ];

    /// Small networks and batches that train in a few milliseconds per
    /// iteration on 32x32 views.
    pub fn toy() -> Self {
        let mut c = Self {
            iterations: 200,
            rays_per_batch: 64,
            n_source_views: 4,
            contrast_views: 3,
            ..Self::default()
        };
        c.model.features.widths = [8, 12, 16];
        c.model.features.attention.n_heads = 2;
        c.model.features.attention.inner_dim = 8;
        c.model.features.attention.n_epipolar_keys = 8;
        c.model.render.hidden = 16;
        c.model.render.token_dim = 8;
        c.model.render.n_coarse = 16;
        c.model.render.n_fine = 16;
        c.model.contrast.n_pixels = 32;
        c.model.contrast.n_neg = 32;
        c
    }

    /// The configuration of the desk-scale ablation study.
    pub fn desk() -> Self {
        let mut c = Self {
            rays_per_batch: 128,
            n_source_views: 4,
            contrast_views: 3,
            ..Self::default()
        };
        c.model.features.widths = [8, 16, 24];
        c.model.features.attention.n_heads = 2;
        c.model.features.attention.inner_dim = 16;
        c.model.features.attention.n_epipolar_keys = 8;
        c.model.render.hidden = 24;
        c.model.render.token_dim = 8;
        c.model.render.n_coarse = 24;
        c.model.render.n_fine = 24;
        c.model.contrast.n_pixels = 64;
        c.model.contrast.n_neg = 64;
        c
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "iterations" => self.iterations = parse(key, value)?,
            "base_lr" => self.adam.lr = parse(key, value)?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.adam.eps = parse(key, value)?,
            "rays_per_batch" => self.rays_per_batch = parse(key, value)?,
            "n_source_views" => self.n_source_views = parse(key, value)?,
            "contrast" => self.contrast = parse_bool(key, value)?,
            "contrast_weight" => self.contrast_weight = parse(key, value)?,
            "contrast_views" => self.contrast_views = parse(key, value)?,
            "visible_rays" => self.visible_rays = parse_bool(key, value)?,
            "negatives" => {
                m.contrast.negatives = choice(
                    key,
                    value,
                    &[("geometric", NegativeMode::Geometric), ("random", NegativeMode::Random)],
                )?
            }
            "weighting" => {
                m.contrast.weighting = choice(
                    key,
                    value,
                    &[
                        ("weighted", WeightMode::Weighted),
                        ("unweighted", WeightMode::Unweighted),
                    ],
                )?
            }
            "attention" => m.features.use_attention = parse_bool(key, value)?,
            "mix_ratio" => self.mix_ratio = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "eval_views" => self.eval_views = parse(key, value)?,
            "widths" => {
                let parts: Vec<usize> = value.split(',').map(|p| parse(key, p.trim())).collect::<Result<_>>()?;
                m.features.widths = parts.try_into().map_err(|_| Error::Config {
                    key: key.into(),
                    message: "expected three comma-separated widths".into(),
                })?;
            }
            "n_heads" => m.features.attention.n_heads = parse(key, value)?,
            "inner_dim" => m.features.attention.inner_dim = parse(key, value)?,
            "n_epipolar_keys" => m.features.attention.n_epipolar_keys = parse(key, value)?,
            "attention_mode" => {
                m.features.attention.mode = choice(
                    key,
                    value,
                    &[
                        ("subtraction", AttentionMode::Subtraction),
                        ("dot-product", AttentionMode::DotProduct),
                    ],
                )?
            }
            "hidden" => m.render.hidden = parse(key, value)?,
            "token_dim" => m.render.token_dim = parse(key, value)?,
            "ray_layers" => m.render.ray_layers = parse(key, value)?,
            "ray_heads" => m.render.ray_heads = parse(key, value)?,
            "n_coarse" => m.render.n_coarse = parse(key, value)?,
            "n_fine" => m.render.n_fine = parse(key, value)?,
            "share_fine" => m.render.share_fine = parse_bool(key, value)?,
            "n_pixels" => m.contrast.n_pixels = parse(key, value)?,
            "n_neg" => m.contrast.n_neg = parse(key, value)?,
            "tau_init" => m.contrast.tau_init = parse(key, value)?,
            "tau_min" => m.contrast.tau_min = parse(key, value)?,
            "tau_prime" => m.contrast.tau_prime = parse(key, value)?,
            "normalize_features" => m.contrast.normalize_features = parse_bool(key, value)?,
            "eps_rel" => m.contrast.eps_rel = parse(key, value)?,
            _ => {
                return Err(Error::Config {
                    key: key.into(),
                    message: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    /// Applies a `key = value` file on top of `self` and validates.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_key_values(text)? {
            self.set(&k, &v)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::Config {
                key: key.into(),
                message: message.into(),
            })
        };
        for (key, v) in [
            ("iterations", self.iterations),
            ("rays_per_batch", self.rays_per_batch),
            ("n_source_views", self.n_source_views),
            ("eval_views", self.eval_views),
        ] {
            if v == 0 {
                return bad(key, "must be at least 1");
            }
        }
        if self.contrast && !(2..=self.n_source_views).contains(&self.contrast_views) {
            return bad("contrast_views", "must lie between 2 and n_source_views");
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return bad("mix_ratio", "must lie in [0, 1]");
        }
        if !(self.contrast_weight >= 0.0) {
            return bad("contrast_weight", "must be non-negative");
        }
        if !(self.adam.lr > 0.0) {
            return bad("base_lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) {
            return bad("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("beta2", "must lie in [0, 1)");
        }
        if !(self.adam.eps > 0.0) {
            return bad("adam_eps", "must be positive");
        }
        if self.model.features.widths.contains(&0) {
            return bad("widths", "must be positive");
        }
        self.model.features.attention.validate()?;
        self.model.render.validate()?;
        self.model.contrast.validate()
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterLog {
    pub iter: usize,
    pub l_color: f64,
    pub l_contrast: f64,
    pub l_total: f64,
    pub psnr: Option<f64>,
}

impl fmt::Display for IterLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iter={} l_color={} l_contrast={} l_total={}",
            self.iter, self.l_color, self.l_contrast, self.l_total
        )?;
        if let Some(p) = self.psnr {
            write!(f, " psnr={p}")?;
        }
        Ok(())
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<IterLog>,
    pub adam_steps: u64,
}

struct Usable<'a> {
    pack: &'a ScenePack,
    bounds: (f64, f64),
}

fn usable_scenes<'a>(packs: &'a [ScenePack], cfg: &TrainConfig) -> Result<Vec<Usable<'a>>> {
    let mut out = Vec::new();
    for (i, pack) in packs.iter().enumerate() {
        if pack.views.len() < cfg.n_source_views + 1 {
            log::warn!(
                "scene {i} has {} views, {} needed; skipped",
                pack.views.len(),
                cfg.n_source_views + 1
            );
            continue;
        }
        if pack.views.iter().any(|v| v.depth.is_none()) {
            log::warn!("scene {i} lacks depth maps; skipped");
            continue;
        }
        match depth_bounds(pack) {
            Ok(bounds) => out.push(Usable { pack, bounds }),
            Err(e) => log::warn!("scene {i}: {e}; skipped"),
        }
    }
    if out.is_empty() {
        return Err(Error::NoUsableScene(format!(
            "{} scenes given, none with {} posed views and depth",
            packs.len(),
            cfg.n_source_views + 1
        )));
    }
    Ok(out)
}

/// Target pixels whose ground-truth surface point some source view sees,
/// or `None` when depth is missing.
pub fn visible_pixels(
    target: &CameraView,
    sources: &[&CameraView],
    eps_rel: f64,
    lookup: DepthLookup,
) -> Option<Vec<usize>> {
    let dt = target.depth.as_ref()?;
    let src: Vec<(&Camera, &DepthMap)> = sources
        .iter()
        .map(|v| v.depth.as_ref().map(|d| (&v.camera, d)))
        .collect::<Option<_>>()?;
    let w = dt.width();
    Some(
        (0..dt.data().len())
            .filter(|&k| {
                let p = Pixel::new((k % w) as f64, (k / w) as f64);
                src.iter()
                    .any(|(c, d)| make_positive_pair(p, &target.camera, c, dt, d, eps_rel, lookup).is_some())
            })
            .collect(),
    )
}

/// `n` random pixels of `candidates` (all pixels when `None` or empty) and
/// their colors.
fn sample_rays(
    target: &CameraView,
    candidates: Option<&[usize]>,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Ray>, Tensor)> {
    let (w, h) = (target.camera.width(), target.camera.height());
    let all: Vec<usize>;
    let pool = match candidates {
        Some(c) if !c.is_empty() => c,
        _ => {
            all = (0..w * h).collect();
            &all
        }
    };
    let picks: Vec<usize> = if n <= pool.len() {
        index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    };
    let mut rays = Vec::with_capacity(n);
    let mut rgb = Vec::with_capacity(3 * n);
    for k in picks {
        let (x, y) = (k % w, k / w);
        rays.push(pixel_ray(Pixel::new(x as f64, y as f64), &target.camera));
        rgb.extend_from_slice(&target.image.get(x, y));
    }
    Ok((rays, Tensor::from_vec(n, 3, rgb)?))
}

/// Losses of one iteration before the update.
pub struct StepLosses {
    pub l_color: f64,
    pub l_contrast: f64,
    pub l_total: f64,
}

/// Trains a freshly initialized model. `on_iter` sees every log line as it
/// is produced.
pub fn train(
    cfg: &TrainConfig,
    packs: &[ScenePack],
    holdout: &[ScenePack],
    seed: u64,
    on_iter: &mut dyn FnMut(&IterLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let scenes = usable_scenes(packs, cfg)?;
    let mut model = Model::new(cfg.model.clone(), seed)?;
    let mut adam = Adam::new(cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a11_5eed);
    let mut log = Vec::with_capacity(cfg.iterations);
    for iter in 1..=cfg.iterations {
        let scene = &scenes[rng.random_range(0..scenes.len())];
        let losses = train_step(&mut model, &mut adam, cfg, scene.pack, scene.bounds, &mut rng)?;
        let psnr = if cfg.eval_every > 0 && iter % cfg.eval_every == 0 && !holdout.is_empty() {
            Some(holdout_psnr(&model, holdout, cfg)?)
        } else {
            None
        };
        let line = IterLog {
            iter,
            l_color: losses.l_color,
            l_contrast: losses.l_contrast,
            l_total: losses.l_total,
            psnr,
        };
        on_iter(&line);
        log.push(line);
    }
    Ok(TrainOutcome {
        model,
        log,
        adam_steps: adam.steps(),
    })
}

/// Mean PSNR over the first `eval_views` views of each held-out scene.
pub fn holdout_psnr(model: &Model, holdout: &[ScenePack], cfg: &TrainConfig) -> Result<f64> {
    let opts = EvalOptions {
        n_source_views: cfg.n_source_views,
        views_per_scene: Some(cfg.eval_views),
        ..Default::default()
    };
    Ok(mean_psnr_ssim(&evaluate(model, holdout, &opts, &[])?).0)
}

/// One Adam step on a random target view of `pack`.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    cfg: &TrainConfig,
    pack: &ScenePack,
    (near, far): (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<StepLosses> {
    let t = rng.random_range(0..pack.views.len());
    let target = &pack.views[t];
    let idx = nearest_views(&pack.views, &target.camera, Some(t), cfg.n_source_views);
    let sources: Vec<&CameraView> = idx.iter().map(|&i| &pack.views[i]).collect();
    let visible = if cfg.visible_rays {
        let c = &model.config.contrast;
        visible_pixels(target, &sources, c.eps_rel, c.depth_lookup)
    } else {
        None
    };
    let (rays, colors) = sample_rays(target, visible.as_deref(), cfg.rays_per_batch, rng)?;
    let feature_seed: u64 = rng.random();
    let sample_seed: u64 = rng.random();

    let (losses, grads) = {
        let mut s = Session::train(&model.params);
        let images: Vec<_> = sources.iter().map(|v| &v.image).collect();
        let cams: Vec<&Camera> = sources.iter().map(|v| &v.camera).collect();
        let maps = model
            .features
            .forward(&mut s, &images, &cams, near, far, feature_seed)?;
        let out = model.renderer.render(
            &mut s,
            maps.render,
            maps.render_grid,
            &sources,
            &rays,
            near,
            far,
            Sampling::Stratified(sample_seed),
        )?;
        let l_color = color_loss(&mut s, out.coarse, out.fine, &colors)?;
        let (total, l_contrast) = if cfg.contrast {
            let k = cfg.contrast_views.min(sources.len());
            let batch = build_contrast_batch(&sources[..k], &model.config.contrast, near, far, rng)?;
            let g = Grid {
                n_views: k,
                ..maps.grid
            };
            let feats = if k < sources.len() {
                let mut keep = RowMap::with_capacity(maps.grid.rows(), g.rows(), g.rows());
                (0..g.rows()).for_each(|r| keep.push_select(r));
                s.graph.rows(maps.enhanced, Arc::new(keep))
            } else {
                maps.enhanced
            };
            let lc = contrastive_loss(&mut s, feats, g, &batch, &model.config.contrast)?;
            let weighted = s.graph.scale(lc, cfg.contrast_weight);
            (s.graph.add(l_color, weighted), s.value(lc).item())
        } else {
            (l_color, 0.0)
        };
        let losses = StepLosses {
            l_color: s.value(l_color).item(),
            l_contrast,
            l_total: s.value(total).item(),
        };
        (losses, s.param_grads(total))
    };
    if !losses.l_total.is_finite() {
        return Err(Error::invalid(format!("non-finite loss {}", losses.l_total)));
    }
    adam.step(&mut model.params, &grads);
    Ok(losses)
}

/// Scene-level mixture of `n = max(|synthetic|, |realish|)` scenes with
/// `round(ratio * n)` realish ones, drawn without replacement.
pub fn mix_datasets(synthetic: &[ScenePack], realish: &[ScenePack], ratio: f64, seed: u64) -> Result<Vec<ScenePack>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid(format!("mix ratio {ratio} outside [0, 1]")));
    }
    let n = synthetic.len().max(realish.len());
    let n_real = (ratio * n as f64).round() as usize;
    let n_syn = n - n_real;
    if n_real > realish.len() || n_syn > synthetic.len() {
        return Err(Error::invalid(format!(
            "ratio {ratio} needs {n_real} realish and {n_syn} synthetic scenes, have {} and {}",
            realish.len(),
            synthetic.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |pool: &[ScenePack], k: usize| {
        let mut idx = index::sample(&mut rng, pool.len(), k).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pool[i].clone()).collect::<Vec<_>>()
    };
    let mut out = pick(realish, n_real);
    out.extend(pick(synthetic, n_syn));
    Ok(out)
}

/// Configurations compared by the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Color loss only, no cross-view attention.
    Base,
    /// Contrastive loss with uniformly random negatives.
    RandomNeg,
    /// Epipolar negatives, all weighted equally.
    GeoNoweight,
    /// Epipolar negatives with distance weights.
    Geo,
    /// Cross-view attention without the contrastive loss.
    Attn,
    /// Weighted epipolar contrast and cross-view attention.
    Full,
}

impl Arm {
    pub const ALL: [Arm; 6] = [
        Arm::Base,
        Arm::RandomNeg,
        Arm::GeoNoweight,
        Arm::Geo,
        Arm::Attn,
        Arm::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Base => "base",
            Arm::RandomNeg => "random_neg",
            Arm::GeoNoweight => "geo_noweight",
            Arm::Geo => "geo",
            Arm::Attn => "attn",
            Arm::Full => "full",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|a| a.name()).collect();
            Error::invalid(format!("unknown arm `{name}`; expected one of {}", names.join(", ")))
        })
    }

    /// `base` with this arm's switches applied.
    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        let (contrast, attention, negatives, weighting) = match self {
            Arm::Base => (false, false, NegativeMode::Geometric, WeightMode::Weighted),
            Arm::RandomNeg => (true, false, NegativeMode::Random, WeightMode::Unweighted),
            Arm::GeoNoweight => (true, false, NegativeMode::Geometric, WeightMode::Unweighted),
            Arm::Geo => (true, false, NegativeMode::Geometric, WeightMode::Weighted),
            Arm::Attn => (false, true, NegativeMode::Geometric, WeightMode::Weighted),
            Arm::Full => (true, true, NegativeMode::Geometric, WeightMode::Weighted),
        };
        c.contrast = contrast;
        c.model.features.use_attention = attention;
        c.model.contrast.negatives = negatives;
        c.model.contrast.weighting = weighting;
        c
    }
}

/// Held-out scores of one trained arm and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub arm: String,
    pub seed: u64,
    pub psnr: f64,
    pub ssim: f64,
    pub first_loss: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub arm: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Mean of `l_color` over the first and last `window` iterations.
pub fn loss_endpoints(log: &[IterLog], window: usize) -> (f64, f64) {
    let w = window.clamp(1, log.len().max(1));
    let mean = |s: &[IterLog]| s.iter().map(|l| l.l_color).sum::<f64>() / s.len().max(1) as f64;
    (
        mean(&log[..w.min(log.len())]),
        mean(&log[log.len().saturating_sub(w)..]),
    )
}

/// Trains `arm` for each seed and scores it on `test`.
pub fn run_arm(
    arm: &str,
    cfg: &TrainConfig,
    train_packs: &[ScenePack],
    test: &[ScenePack],
    seeds: &[u64],
    eval: &EvalOptions,
    on_iter: &mut dyn FnMut(&str, u64, &IterLog),
) -> Result<Vec<RunResult>> {
    let mut out = Vec::new();
    for &seed in seeds {
        let res = train(cfg, train_packs, &[], seed, &mut |l| on_iter(arm, seed, l))?;
        let (first, last) = loss_endpoints(&res.log, 10);
        let (psnr, ssim) = mean_psnr_ssim(&evaluate(&res.model, test, eval, &[])?);
        out.push(RunResult {
            arm: arm.to_string(),
            seed,
            psnr,
            ssim,
            first_loss: first,
            final_loss: last,
        });
    }
    Ok(out)
}

pub fn summarize(runs: &[RunResult]) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = Vec::new();
    for r in runs {
        if rows.iter().all(|s| s.arm != r.arm) {
            let mine: Vec<&RunResult> = runs.iter().filter(|x| x.arm == r.arm).collect();
            let n = mine.len() as f64;
            rows.push(SummaryRow {
                arm: r.arm.clone(),
                psnr: mine.iter().map(|x| x.psnr).sum::<f64>() / n,
                ssim: mine.iter().map(|x| x.ssim).sum::<f64>() / n,
            });
        }
    }
    rows
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("arm,psnr,ssim\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.arm, r.psnr, r.ssim));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_value_errors_name_the_key() {
        let mut c = TrainConfig::default();
        c.apply_text("# comment\niterations = 5 # trailing\nnegatives = random\n")
            .unwrap();
        assert_eq!(c.iterations, 5);
        assert_eq!(c.model.contrast.negatives, NegativeMode::Random);
        for (text, key) in [
            ("bogus = 1", "bogus"),
            ("iterations = x", "iterations"),
            ("mix_ratio = 1.5", "mix_ratio"),
            ("attention = maybe", "attention"),
            ("n_neg = 1\nn_neg = 2", "n_neg"),
            ("widths = 1,2", "widths"),
        ] {
            match TrainConfig::default().apply_text(text) {
                Err(Error::Config { key: k, .. }) => assert_eq!(k, key, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn every_listed_key_is_settable() {
        let values = [
            ("widths", "4,6,8"),
            ("negatives", "geometric"),
            ("weighting", "unweighted"),
            ("attention_mode", "dot-product"),
        ];
        for key in TrainConfig::KEYS {
            let v = values.iter().find(|(k, _)| k == key).map(|(_, v)| *v);
            let v = v.unwrap_or(
                if [
                    "contrast",
                    "visible_rays",
                    "attention",
                    "share_fine",
                    "normalize_features",
                ]
                .contains(key)
                {
                    "true"
                } else {
                    "2"
                },
            );
            TrainConfig::default().set(key, v).unwrap();
        }
    }

    #[test]
    fn arms_toggle_the_right_switches() {
        let base = TrainConfig::default();
        let b = Arm::Base.configure(&base);
        assert!(!b.contrast && !b.model.features.use_attention);
        let f = Arm::Full.configure(&base);
        assert!(f.contrast && f.model.features.use_attention);
        assert_eq!(Arm::parse("geo_noweight").unwrap(), Arm::GeoNoweight);
        assert!(Arm::parse("nope").is_err());
    }

    #[test]
    fn log_line_format() {
        let l = IterLog {
            iter: 3,
            l_color: 0.5,
            l_contrast: 0.0,
            l_total: 0.5,
            psnr: Some(20.0),
        };
        assert_eq!(l.to_string(), "iter=3 l_color=0.5 l_contrast=0 l_total=0.5 psnr=20");
    }
}
