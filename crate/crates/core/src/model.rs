//! Feature network and renderer bundled with their parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Session, Tensor};
use crate::contrast::{init_temperature, ContrastConfig};
use crate::error::{Error, Result};
use crate::features::{images_to_tensor, FeatureNet, FeatureNetConfig, Grid};
use crate::frame::{CameraView, DepthMap, Image, Pixel};
use crate::geometry::{camera_distance, pixel_ray, Camera, Ray};
use crate::render::{point_features, RenderNetConfig, Renderer, Sampling};

/// Seed of the epipolar key depths at inference time.
pub const EVAL_SEED: u64 = 0;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub features: FeatureNetConfig,
    pub render: RenderNetConfig,
    pub contrast: ContrastConfig,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub features: FeatureNet,
    pub renderer: Renderer,
}

/// A rendered target view.
#[derive(Clone, Debug)]
pub struct RenderedView {
    pub image: Image,
    /// Expected depth under the fine softmax weights.
    pub depth: DepthMap,
    /// Pixels whose ray no source view sees.
    pub n_unseen: usize,
}

/// Indices of the `n` views closest to `target` by pose distance, excluding
/// the target itself. Ties keep index order.
pub fn nearest_views(views: &[CameraView], target: &Camera, exclude: Option<usize>, n: usize) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = views
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, v)| (camera_distance(&v.camera.extrinsics, &target.extrinsics), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().take(n).map(|(_, i)| i).collect()
}

impl Model {
    /// Freshly initialized model; identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.contrast.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = FeatureNet::new(&mut params, &mut rng, config.features.clone())?;
        let renderer = Renderer::new(&mut params, &mut rng, features.render_channels(), config.render.clone())?;
        init_temperature(&mut params, &config.contrast);
        Ok(Self {
            config,
            params,
            features,
            renderer,
        })
    }

    /// Model with the given parameters, which must match the architecture.
    pub fn with_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        for (name, t) in model.params.iter() {
            let Some(p) = params.get(name) else {
                return Err(Error::invalid(format!("parameter `{name}` missing")));
            };
            if p.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{name}` is {:?}, expected {:?}",
                    p.shape(),
                    t.shape()
                )));
            }
        }
        if params.len() != model.params.len() {
            return Err(Error::invalid(format!(
                "{} parameters given, architecture has {}",
                params.len(),
                model.params.len()
            )));
        }
        model.params = params;
        Ok(model)
    }

    /// Names of one weight per network block.
    pub fn probe_parameters(&self) -> Vec<String> {
        let mut v = self.features.probe_parameters();
        v.extend(self.renderer.coarse.probe_parameters());
        if !self.config.render.share_fine {
            v.extend(self.renderer.fine.probe_parameters());
        }
        v
    }

    /// Rendering features of the source views, evaluated without a tape.
    pub fn source_features(&self, sources: &[&CameraView], near: f64, far: f64) -> Result<(Tensor, Grid)> {
        let mut s = Session::eval(&self.params);
        let images: Vec<&Image> = sources.iter().map(|v| &v.image).collect();
        let cams: Vec<&Camera> = sources.iter().map(|v| &v.camera).collect();
        let x = s.constant(images_to_tensor(&images)?);
        let maps = self.features.forward_input(&mut s, x, &cams, near, far, EVAL_SEED)?;
        Ok((s.value(maps.render).clone(), maps.render_grid))
    }

    /// Renders every pixel of `target` from `sources`, `chunk` rays at a time.
    pub fn render_view(
        &self,
        target: &Camera,
        sources: &[&CameraView],
        near: f64,
        far: f64,
        chunk: usize,
    ) -> Result<RenderedView> {
        if sources.is_empty() {
            return Err(Error::invalid("rendering needs at least one source view"));
        }
        let (feats, grid) = self.source_features(sources, near, far)?;
        let (w, h) = (target.width(), target.height());
        let pixels: Vec<Pixel> = (0..h)
            .flat_map(|y| (0..w).map(move |x| Pixel::new(x as f64, y as f64)))
            .collect();
        let mut rgb = Vec::with_capacity(w * h * 3);
        let mut depth = Vec::with_capacity(w * h);
        let mut n_unseen = 0;
        for part in pixels.chunks(chunk.max(1)) {
            let rays: Vec<Ray> = part.iter().map(|&p| pixel_ray(p, target)).collect();
            let mut s = Session::eval(&self.params);
            let f = s.constant(feats.clone());
            let out = self
                .renderer
                .render(&mut s, f, grid, sources, &rays, near, far, Sampling::Deterministic)?;
            rgb.extend(s.value(out.fine).data().iter().map(|c| c.clamp(0.0, 1.0)));
            let wts = s.value(out.fine_weights);
            let n = out.fine_depths[0].len();
            for (r, ds) in out.fine_depths.iter().enumerate() {
                depth.push(ds.iter().enumerate().map(|(k, d)| wts.get(r * n + k, 0) * d).sum());
            }
            n_unseen += out.ray_valid.iter().filter(|v| !**v).count();
        }
        if n_unseen > 0 {
            log::warn!("{n_unseen} rays are not seen by any source view and fall back to the background");
        }
        Ok(RenderedView {
            image: Image::new(w, h, rgb)?,
            depth: DepthMap::new(w, h, depth)?,
            n_unseen,
        })
    }

    /// Fine-network densities at the given depths along each ray.
    pub fn fine_densities(
        &self,
        sources: &[&CameraView],
        rays: &[Ray],
        depths: &[f64],
        near: f64,
        far: f64,
        chunk: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let (feats, grid) = self.source_features(sources, near, far)?;
        let cams: Vec<&Camera> = sources.iter().map(|v| &v.camera).collect();
        let images: Vec<&Image> = sources.iter().map(|v| &v.image).collect();
        let mut out = Vec::with_capacity(rays.len());
        for part in rays.chunks(chunk.max(1)) {
            let ds = vec![depths.to_vec(); part.len()];
            let pts = point_features(part, &ds, &cams, &images, grid)?;
            let mut s = Session::eval(&self.params);
            let f = s.constant(feats.clone());
            let o = self.renderer.fine.forward(&mut s, f, &pts);
            let sig = s.value(o.sigma);
            out.extend(sig.data().chunks(depths.len()).map(|c| c.to_vec()));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraExtrinsics, CameraIntrinsics, Vec3};

    fn view(x: f64) -> CameraView {
        CameraView {
            camera: Camera::new(
                CameraIntrinsics::from_fov(8, 8, 1.0).unwrap(),
                CameraExtrinsics::from_yaw_pitch(Vec3::new(x, 1.0, 0.0), 0.0, 0.0),
            ),
            image: Image::filled(8, 8, [0.3; 3]),
            depth: None,
        }
    }

    #[test]
    fn nearest_views_skip_the_target() {
        let views: Vec<CameraView> = [0.0, 0.5, 0.1, 2.0].iter().map(|&x| view(x)).collect();
        let near = nearest_views(&views, &views[0].camera, Some(0), 2);
        assert_eq!(near, vec![2, 1]);
    }

    #[test]
    fn params_must_match_architecture() {
        let cfg = ModelConfig::default();
        let m = Model::new(cfg.clone(), 1).unwrap();
        assert!(Model::with_params(cfg.clone(), m.params.clone()).is_ok());
        let mut p = m.params.clone();
        p.insert("extra", Tensor::scalar(1.0));
        assert!(Model::with_params(cfg, p).is_err());
    }
}
