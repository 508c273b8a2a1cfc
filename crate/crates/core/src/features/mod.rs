//! Shared per-view CNN with cross-view attention at the bottleneck.

mod attention;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use attention::{
    fuse_epipolar, fuse_views, sinusoidal_positions, Attended, AttentionConfig, AttentionMode, Mha, PositionEncoding,
};

use crate::autodiff::nn::{Conv2d, Linear};
use crate::autodiff::{ParamStore, RowMap, Session, Tensor, Var};
use crate::error::{Error, Result};
use crate::frame::{bilinear_stencil, Image, Pixel};
use crate::geometry::{depths_at_fractions, epipolar_at_depths, stratified_fractions, Camera};

const NORM_EPS: f64 = 1e-5;

/// Bottleneck stride of the encoder.
pub const DOWNSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNetConfig {
    /// Encoder widths at strides 1, 2 and 4; the decoder mirrors the first two.
    pub widths: [usize; 3],
    pub attention: AttentionConfig,
    pub use_attention: bool,
}

impl Default for FeatureNetConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64],
            attention: AttentionConfig::default(),
            use_attention: true,
        }
    }
}

/// Layout of a batch of per-view feature grids stored one cell per row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub n_views: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Input pixels per grid cell.
    pub stride: usize,
}

impl Grid {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn rows(&self) -> usize {
        self.n_views * self.cells()
    }

    pub fn row(&self, view: usize, x: usize, y: usize) -> usize {
        (view * self.height + y) * self.width + x
    }

    /// Bilinear stencil of an input-image pixel in `view`, as global rows.
    pub fn stencil(&self, view: usize, p: Pixel) -> [(usize, f64); 4] {
        let q = p / self.stride as f64;
        let mut st = bilinear_stencil(self.width, self.height, q);
        for e in &mut st {
            e.0 += view * self.cells();
        }
        st
    }
}

/// Feature grids of one forward pass. `base` and `enhanced` live on the
/// bottleneck grid; `render` is the decoder output at input resolution.
pub struct FeatureMaps {
    pub base: Var,
    pub enhanced: Var,
    pub render: Var,
    pub grid: Grid,
    pub render_grid: Grid,
    pub trace: Option<AttentionTrace>,
}

/// Attention weights and masks of a cross-view pass, for inspection.
pub struct AttentionTrace {
    pub epipolar_weights: Var,
    pub epipolar_mask: Arc<Vec<bool>>,
    pub view_weights: Var,
    pub view_mask: Arc<Vec<bool>>,
    /// Bottleneck cells with at least one valid key in some other view.
    pub attended: Vec<bool>,
}

/// Images batched as pixel rows, `[n * h * w, 3]`.
pub fn images_to_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::invalid("no images"))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * w * h * 3);
    for im in images {
        if (im.width(), im.height()) != (w, h) {
            return Err(Error::Shape(format!(
                "image of {}x{} in a batch of {w}x{h}",
                im.width(),
                im.height()
            )));
        }
        data.extend_from_slice(im.data());
    }
    Tensor::from_vec(images.len() * w * h, 3, data)
}

/// Bilinear resampling of a grid to a finer one (`factor` times denser),
/// aligned on cell centers.
fn upsample_map(from: Grid, factor: usize) -> RowMap {
    let (h, w) = (from.height * factor, from.width * factor);
    let mut m = RowMap::with_capacity(from.rows(), from.n_views * h * w, from.n_views * h * w * 4);
    for v in 0..from.n_views {
        for y in 0..h {
            for x in 0..w {
                let p = Pixel::new(x as f64, y as f64) / factor as f64;
                let st = bilinear_stencil(from.width, from.height, p);
                m.push_row(st.iter().map(|&(i, wt)| (i + v * from.cells(), wt)));
            }
        }
    }
    m
}

#[derive(Clone, Debug)]
pub struct FeatureNet {
    pub config: FeatureNetConfig,
    enc: [Conv2d; 3],
    dec: [Conv2d; 2],
    reduce_epipolar: Linear,
    reduce_view: Linear,
    lift: Linear,
    epipolar: Mha,
    views: Mha,
    positions: Option<String>,
}

/// Encoder activations of one batch.
pub struct Encoded {
    pub skips: [Var; 2],
    pub base: Var,
    pub grid: Grid,
}

impl FeatureNet {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: FeatureNetConfig) -> Result<Self> {
        config.attention.validate()?;
        let [w1, w2, w3] = config.widths;
        if w1 == 0 || w2 == 0 || w3 == 0 {
            return Err(Error::Config {
                key: "widths".into(),
                message: "feature widths must be positive".into(),
            });
        }
        let a = &config.attention;
        let enc = [
            Conv2d::new(store, rng, "feat.enc1", 3, w1, 3, 1),
            Conv2d::new(store, rng, "feat.enc2", w1, w2, 3, 2),
            Conv2d::new(store, rng, "feat.enc3", w2, w3, 3, 2),
        ];
        let dec = [
            Conv2d::new(store, rng, "feat.dec1", w3 + w2, w2, 3, 1),
            Conv2d::new(store, rng, "feat.dec2", w2 + w1, w1, 3, 1),
        ];
        let reduce_epipolar = Linear::new(store, rng, "feat.reduce1", w3, a.inner_dim, false, true);
        let reduce_view = Linear::new(store, rng, "feat.reduce2", w3, a.inner_dim, false, true);
        let lift = Linear::new(store, rng, "feat.lift", a.inner_dim, w3, false, true);
        let epipolar = Mha::new(store, rng, "feat.stage1", a.inner_dim, a.n_heads, a.mode);
        let views = Mha::new(store, rng, "feat.stage2", a.inner_dim, a.n_heads, a.mode);
        let positions = match a.position {
            PositionEncoding::Sinusoidal => None,
            PositionEncoding::Learned => {
                let name = "feat.stage1.pos".to_string();
                store.insert(&name, sinusoidal_positions(a.n_epipolar_keys, a.inner_dim));
                Some(name)
            }
        };
        Ok(Self {
            config,
            enc,
            dec,
            reduce_epipolar,
            reduce_view,
            lift,
            epipolar,
            views,
            positions,
        })
    }

    pub fn render_channels(&self) -> usize {
        self.config.widths[0]
    }

    /// Names of one weight per block, used by gradient probes.
    pub fn probe_parameters(&self) -> Vec<String> {
        vec![
            self.enc[0].weight_name().to_string(),
            self.reduce_epipolar.weight_name().to_string(),
            self.lift.weight_name().to_string(),
            self.dec[1].weight_name().to_string(),
        ]
    }

    fn conv_block(
        &self,
        s: &mut Session,
        conv: &Conv2d,
        x: Var,
        n: usize,
        h: usize,
        w: usize,
        relu: bool,
    ) -> (Var, usize, usize) {
        let (y, ho, wo) = conv.forward(s, x, n, h, w);
        let y = s.graph.instance_norm(y, n, NORM_EPS);
        let y = if relu { s.graph.relu(y) } else { y };
        (y, ho, wo)
    }

    /// Runs the shared encoder on `[n * h * w, 3]` pixel rows.
    pub fn encode(&self, s: &mut Session, x: Var, n: usize, h: usize, w: usize) -> Result<Encoded> {
        if n == 0 {
            return Err(Error::invalid("no views to encode"));
        }
        if !h.is_multiple_of(DOWNSAMPLE) || !w.is_multiple_of(DOWNSAMPLE) {
            return Err(Error::Shape(format!(
                "image size {w}x{h} is not a multiple of {DOWNSAMPLE}"
            )));
        }
        if s.graph.shape(x) != (n * h * w, 3) {
            return Err(Error::Shape(format!(
                "input is {:?}, expected [{}, 3]",
                s.graph.shape(x),
                n * h * w
            )));
        }
        let (e1, h1, w1) = self.conv_block(s, &self.enc[0], x, n, h, w, true);
        let (e2, h2, w2) = self.conv_block(s, &self.enc[1], e1, n, h1, w1, true);
        let (e3, h3, w3) = self.conv_block(s, &self.enc[2], e2, n, h2, w2, true);
        Ok(Encoded {
            skips: [e1, e2],
            base: e3,
            grid: Grid {
                n_views: n,
                height: h3,
                width: w3,
                channels: self.config.widths[2],
                stride: h / h3,
            },
        })
    }

    /// Two-stage cross-view attention over the bottleneck features. Every
    /// cell attends along its epipolar line in each other view, then across
    /// views; the result is added back to the base features. Cells without a
    /// single valid key keep their base features.
    pub fn cross_view_enhance(
        &self,
        s: &mut Session,
        base: Var,
        grid: Grid,
        cameras: &[&Camera],
        near: f64,
        far: f64,
        seed: u64,
    ) -> Result<(Var, Option<AttentionTrace>)> {
        if cameras.len() != grid.n_views {
            return Err(Error::Shape(format!(
                "{} cameras for {} feature views",
                cameras.len(),
                grid.n_views
            )));
        }
        if !(near > 0.0 && far > near) {
            return Err(Error::invalid(format!("invalid depth range [{near}, {far}]")));
        }
        let n = grid.n_views;
        if n < 2 {
            return Ok((base, None));
        }
        let cfg = &self.config.attention;
        let k = cfg.n_epipolar_keys;
        let fractions = stratified_fractions(k, &mut ChaCha8Rng::seed_from_u64(seed));
        let depths = depths_at_fractions(near, far, &fractions);
        let cells = grid.cells();
        let n_query = n * cells * (n - 1);

        let mut keys = RowMap::with_capacity(grid.rows(), n_query * k, n_query * k * 4);
        let mut key_mask = Vec::with_capacity(n_query * k);
        let mut queries = RowMap::with_capacity(grid.rows(), n_query, n_query);
        let mut view_mask = Vec::with_capacity(n_query);
        let mut attended = Vec::with_capacity(grid.rows());
        for i in 0..n {
            for y in 0..grid.height {
                for x in 0..grid.width {
                    let u = Pixel::new((x * grid.stride) as f64, (y * grid.stride) as f64);
                    let mut any = false;
                    for j in (0..n).filter(|&j| j != i) {
                        let ep = epipolar_at_depths(u, cameras[i], cameras[j], &depths);
                        queries.push_select(grid.row(i, x, y));
                        for (proj, &ok) in ep.projections.iter().zip(&ep.valid) {
                            if ok {
                                keys.push_row(grid.stencil(j, proj.pixel));
                            } else {
                                keys.push_empty();
                            }
                            key_mask.push(ok);
                        }
                        let has = ep.valid.iter().any(|&v| v);
                        view_mask.push(has);
                        any |= has;
                    }
                    attended.push(any);
                }
            }
        }

        let reduced = self.reduce_epipolar.forward(s, base);
        let key_feats = s.graph.rows(reduced, Arc::new(keys));
        let query_feats = s.graph.rows(reduced, Arc::new(queries));
        let pos = match &self.positions {
            Some(name) => s.param(name),
            None => s.constant(sinusoidal_positions(k, cfg.inner_dim)),
        };
        let key_mask = Arc::new(key_mask);
        let stage1 = fuse_epipolar(
            s,
            &self.epipolar,
            query_feats,
            key_feats,
            pos,
            k,
            Some(key_mask.clone()),
        );

        let q2 = self.reduce_view.forward(s, base);
        let view_mask = Arc::new(view_mask);
        let stage2 = fuse_views(s, &self.views, q2, stage1.out, n - 1, Some(view_mask.clone()))?;
        let lifted = self.lift.forward(s, stage2.out);
        let gate = s.constant(Tensor::column(
            attended.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect(),
        ));
        let residual = s.graph.mul_col(lifted, gate);
        let enhanced = s.graph.add(base, residual);
        Ok((
            enhanced,
            Some(AttentionTrace {
                epipolar_weights: stage1.weights,
                epipolar_mask: key_mask,
                view_weights: stage2.weights,
                view_mask,
                attended,
            }),
        ))
    }

    /// Decoder from (enhanced) bottleneck features to full-resolution
    /// rendering features.
    pub fn decode(&self, s: &mut Session, enc: &Encoded, bottleneck: Var) -> Var {
        let g3 = enc.grid;
        let g2 = Grid {
            height: g3.height * 2,
            width: g3.width * 2,
            stride: g3.stride / 2,
            channels: self.config.widths[1],
            ..g3
        };
        let up = s.graph.rows(bottleneck, Arc::new(upsample_map(g3, 2)));
        let cat = s.graph.concat_cols(&[up, enc.skips[1]]);
        let (d1, _, _) = self.conv_block(s, &self.dec[0], cat, g3.n_views, g2.height, g2.width, true);
        let up = s.graph.rows(d1, Arc::new(upsample_map(g2, 2)));
        let cat = s.graph.concat_cols(&[up, enc.skips[0]]);
        let (d2, _, _) = self.dec[1].forward(s, cat, g3.n_views, g2.height * 2, g2.width * 2);
        d2
    }

    /// Full pass over posed views: encode, enhance (when enabled), decode.
    pub fn forward_input(
        &self,
        s: &mut Session,
        x: Var,
        cameras: &[&Camera],
        near: f64,
        far: f64,
        seed: u64,
    ) -> Result<FeatureMaps> {
        let first = cameras.first().ok_or_else(|| Error::invalid("no views"))?;
        let (h, w) = (first.height(), first.width());
        let enc = self.encode(s, x, cameras.len(), h, w)?;
        let (enhanced, trace) = if self.config.use_attention {
            self.cross_view_enhance(s, enc.base, enc.grid, cameras, near, far, seed)?
        } else {
            (enc.base, None)
        };
        let render = self.decode(s, &enc, enhanced);
        Ok(FeatureMaps {
            base: enc.base,
            enhanced,
            render,
            grid: enc.grid,
            render_grid: Grid {
                n_views: cameras.len(),
                height: h,
                width: w,
                channels: self.render_channels(),
                stride: 1,
            },
            trace,
        })
    }

    pub fn forward(
        &self,
        s: &mut Session,
        images: &[&Image],
        cameras: &[&Camera],
        near: f64,
        far: f64,
        seed: u64,
    ) -> Result<FeatureMaps> {
        if images.len() != cameras.len() {
            return Err(Error::Shape(format!(
                "{} images for {} cameras",
                images.len(),
                cameras.len()
            )));
        }
        let x = s.constant(images_to_tensor(images)?);
        self.forward_input(s, x, cameras, near, far, seed)
    }
}
