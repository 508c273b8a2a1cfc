//! Geometry-aware weighted InfoNCE between source views.

use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, RowMap, Session, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::Grid;
use crate::frame::{CameraView, DepthLookup, Pixel};
use crate::geometry::{make_negative_pairs, make_positive_pair, random_negative_pairs, Camera};

/// Learnable log-temperature.
pub const TAU_PARAM: &str = "contrast.log_tau";

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeMode {
    /// Projections of samples on the ray of `p`.
    Geometric,
    /// Uniform pixels of the other view.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    Weighted,
    Unweighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastConfig {
    pub n_pixels: usize,
    pub n_neg: usize,
    pub tau_init: f64,
    pub tau_min: f64,
    pub tau_prime: f64,
    pub normalize_features: bool,
    pub eps_rel: f64,
    pub depth_lookup: DepthLookup,
    pub negatives: NegativeMode,
    pub weighting: WeightMode,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            n_pixels: 576,
            n_neg: 512,
            tau_init: 0.1,
            tau_min: 0.01,
            tau_prime: 10000.0,
            normalize_features: true,
            eps_rel: 0.01,
            depth_lookup: DepthLookup::Bilinear,
            negatives: NegativeMode::Geometric,
            weighting: WeightMode::Weighted,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::Config {
                key: key.into(),
                message: message.into(),
            })
        };
        if self.n_pixels == 0 {
            return bad("n_pixels", "must be at least 1");
        }
        if self.n_neg == 0 {
            return bad("n_neg", "must be at least 1");
        }
        if !(self.tau_init > 0.0 && self.tau_min > 0.0) {
            return bad("tau_init", "temperatures must be positive");
        }
        if !(self.tau_prime > 0.0) {
            return bad("tau_prime", "must be positive");
        }
        if !(self.eps_rel >= 0.0) {
            return bad("eps_rel", "must be non-negative");
        }
        Ok(())
    }
}

/// Registers the log-temperature parameter.
pub fn init_temperature(store: &mut ParamStore, cfg: &ContrastConfig) {
    store.insert(TAU_PARAM, Tensor::scalar(cfg.tau_init.ln()));
}

/// Current temperature `max(exp(log_tau), tau_min)`.
pub fn temperature(store: &ParamStore, cfg: &ContrastConfig) -> Option<f64> {
    store.get(TAU_PARAM).map(|t| t.item().exp().max(cfg.tau_min))
}

/// Negative weights `λ = N_neg · softmax(‖q₊ − q₋‖ / τ′)`, summing to `N_neg`.
pub fn negative_weights(q_plus: Pixel, q_minus: &[Pixel], tau_prime: f64) -> Result<Vec<f64>> {
    if q_minus.is_empty() {
        return Err(Error::invalid("negative weights need at least one negative"));
    }
    if !(tau_prime > 0.0) {
        return Err(Error::invalid("tau_prime must be positive"));
    }
    let z: Vec<f64> = q_minus.iter().map(|q| (q - q_plus).norm() / tau_prime).collect();
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let total: f64 = e.iter().sum();
    let n = q_minus.len() as f64;
    Ok(e.into_iter().map(|v| n * v / total).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `-log(e^{p·q₊/τ} / (e^{p·q₊/τ} + Σ λ e^{p·q₋/τ}))`, evaluated with
/// max subtraction.
pub fn weighted_info_nce(p: &[f64], q_plus: &[f64], q_minus: &[Vec<f64>], lambda: &[f64], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    if lambda.len() != q_minus.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} negatives",
            lambda.len(),
            q_minus.len()
        )));
    }
    if q_plus.len() != p.len() || q_minus.iter().any(|q| q.len() != p.len()) {
        return Err(Error::Shape("feature dimensions differ".into()));
    }
    let zp = dot(p, q_plus) / tau;
    let mut terms = vec![zp];
    for (q, &l) in q_minus.iter().zip(lambda) {
        if l > 0.0 {
            terms.push(dot(p, q) / tau + l.ln());
        }
    }
    let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln();
    Ok(lse - zp)
}

/// Uniform negatives of view `j`, drop-in for the epipolar sampler.
pub fn random_negative_baseline(
    _p: Pixel,
    _cam_i: &Camera,
    cam_j: &Camera,
    n_neg: usize,
    _near: f64,
    _far: f64,
    rng: &mut impl Rng,
) -> Vec<Pixel> {
    random_negative_pairs(cam_j, n_neg, rng)
}

/// Samples of one ordered view pair. Only unoccluded pixels are stored; the
/// number drawn before occlusion filtering is kept in `n_drawn`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSamples {
    pub i: usize,
    pub j: usize,
    pub n_drawn: usize,
    pub pixels: Vec<Pixel>,
    pub positives: Vec<Pixel>,
    pub negatives: Vec<Vec<Pixel>>,
    pub weights: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContrastBatch {
    pub pairs: Vec<PairSamples>,
}

impl ContrastBatch {
    pub fn n_terms(&self) -> usize {
        self.pairs.iter().map(|p| p.pixels.len()).sum()
    }
}

/// Draws pixels with finite depth in every view `i`, their positives and
/// negatives in every other view `j`.
pub fn build_contrast_batch(
    views: &[&CameraView],
    cfg: &ContrastConfig,
    near: f64,
    far: f64,
    rng: &mut impl Rng,
) -> Result<ContrastBatch> {
    cfg.validate()?;
    if views.len() < 2 {
        return Err(Error::invalid("contrastive loss needs at least two views"));
    }
    let mut pairs = Vec::new();
    for (i, vi) in views.iter().enumerate() {
        let depth_i = vi
            .depth
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("view {i} has no depth")))?;
        let finite: Vec<usize> = (0..depth_i.data().len())
            .filter(|&k| depth_i.data()[k].is_finite())
            .collect();
        for (j, vj) in views.iter().enumerate() {
            if i == j {
                continue;
            }
            let depth_j = vj
                .depth
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("view {j} has no depth")))?;
            let n = cfg.n_pixels.min(finite.len());
            let picks = index::sample(rng, finite.len(), n);
            let mut pair = PairSamples {
                i,
                j,
                n_drawn: n,
                pixels: Vec::new(),
                positives: Vec::new(),
                negatives: Vec::new(),
                weights: Vec::new(),
            };
            for k in picks.iter() {
                let idx = finite[k];
                let p = Pixel::new((idx % depth_i.width()) as f64, (idx / depth_i.width()) as f64);
                let Some(q) = make_positive_pair(
                    p,
                    &vi.camera,
                    &vj.camera,
                    depth_i,
                    depth_j,
                    cfg.eps_rel,
                    cfg.depth_lookup,
                ) else {
                    continue;
                };
                let neg = match cfg.negatives {
                    NegativeMode::Geometric => {
                        make_negative_pairs(p, &vi.camera, &vj.camera, cfg.n_neg, near, far, rng)
                    }
                    NegativeMode::Random => {
                        random_negative_baseline(p, &vi.camera, &vj.camera, cfg.n_neg, near, far, rng)
                    }
                };
                let w = match cfg.weighting {
                    WeightMode::Weighted => negative_weights(q, &neg, cfg.tau_prime)?,
                    WeightMode::Unweighted => vec![1.0; neg.len()],
                };
                pair.pixels.push(p);
                pair.positives.push(q);
                pair.negatives.push(neg);
                pair.weights.push(w);
            }
            pairs.push(pair);
        }
    }
    Ok(ContrastBatch { pairs })
}

fn gather(grid: Grid, points: impl Iterator<Item = (usize, Pixel)>, n_rows: usize) -> RowMap {
    let mut m = RowMap::with_capacity(grid.rows(), n_rows, n_rows * 4);
    for (view, p) in points {
        m.push_row(grid.stencil(view, p));
    }
    m
}

/// Differentiable inverse temperature `min(exp(-log_tau), 1 / tau_min)`.
fn inverse_temperature(s: &mut Session, cfg: &ContrastConfig) -> Var {
    let lt = s.param(TAU_PARAM);
    let neg = s.graph.scale(lt, -1.0);
    let inv = s.graph.exp(neg);
    let flipped = s.graph.scale(inv, -1.0);
    let capped = s.graph.clamp_min(flipped, -1.0 / cfg.tau_min);
    s.graph.scale(capped, -1.0)
}

/// Mean over view pairs of the mean weighted InfoNCE over each pair's
/// unoccluded pixels. Features are bilinear samples of `features` (laid out
/// as `grid`) at input-pixel coordinates divided by the grid stride. Pairs
/// without unoccluded pixels are left out; with none at all the loss is a
/// constant zero.
pub fn contrastive_loss(
    s: &mut Session,
    features: Var,
    grid: Grid,
    batch: &ContrastBatch,
    cfg: &ContrastConfig,
) -> Result<Var> {
    if s.graph.shape(features) != (grid.rows(), grid.channels) {
        return Err(Error::Shape(format!(
            "features are {:?}, grid expects [{}, {}]",
            s.graph.shape(features),
            grid.rows(),
            grid.channels
        )));
    }
    let used: Vec<&PairSamples> = batch.pairs.iter().filter(|p| !p.pixels.is_empty()).collect();
    if used.is_empty() {
        log::warn!("no unoccluded pixel in any view pair; contrastive loss is zero");
        return Ok(s.constant(Tensor::scalar(0.0)));
    }
    let m = batch.n_terms();
    let n_neg = used[0].negatives[0].len();
    if used.iter().any(|p| p.negatives.iter().any(|n| n.len() != n_neg)) {
        return Err(Error::Shape("negative lists differ in length".into()));
    }
    let anchors = gather(
        grid,
        used.iter().flat_map(|p| p.pixels.iter().map(move |&x| (p.i, x))),
        m,
    );
    let positives = gather(
        grid,
        used.iter().flat_map(|p| p.positives.iter().map(move |&x| (p.j, x))),
        m,
    );
    let negatives = gather(
        grid,
        used.iter()
            .flat_map(|p| p.negatives.iter().flatten().map(move |&x| (p.j, x))),
        m * n_neg,
    );
    let mut log_lambda = Vec::with_capacity(m * n_neg);
    let mut scale = Vec::with_capacity(m);
    for p in &used {
        for w in &p.weights {
            log_lambda.extend(w.iter().map(|&l| if l > 0.0 { l.ln() } else { -1e300 }));
            scale.push(1.0 / (p.pixels.len() * used.len()) as f64);
        }
    }

    let mut pick = |map: RowMap| {
        let v = s.graph.rows(features, Arc::new(map));
        if cfg.normalize_features {
            s.graph.l2_normalize_rows(v, NORM_EPS)
        } else {
            v
        }
    };
    let a = pick(anchors);
    let qp = pick(positives);
    let qn = pick(negatives);
    let inv_tau = inverse_temperature(s, cfg);

    let prod = s.graph.mul(a, qp);
    let zp = s.graph.sum_cols(prod);
    let zp = s.graph.mul_scalar(zp, inv_tau);
    let a_rep = s.graph.rows(a, Arc::new(RowMap::repeat_each(m, n_neg)));
    let prod = s.graph.mul(a_rep, qn);
    let zn = s.graph.sum_cols(prod);
    let zn = s.graph.reshape(zn, m, n_neg);
    let zn = s.graph.mul_scalar(zn, inv_tau);
    let ll = s.constant(Tensor::from_vec(m, n_neg, log_lambda)?);
    let zn = s.graph.add(zn, ll);
    let all = s.graph.concat_cols(&[zp, zn]);
    let lse = s.graph.logsumexp_rows(all);
    let per = s.graph.sub(lse, zp);
    let w = s.constant(Tensor::column(scale));
    let weighted = s.graph.mul_col(per, w);
    Ok(s.graph.sum_all(weighted))
}
