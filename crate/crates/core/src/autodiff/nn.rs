use rand_chacha::ChaCha8Rng;

use super::graph::{ConvGeom, Var};
use super::params::{ParamStore, Session};

/// Affine layer `x W + b` with parameters `{name}.w` and `{name}.b`.
#[derive(Clone, Debug)]
pub struct Linear {
    w: String,
    b: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        relu_init: bool,
        bias: bool,
    ) -> Self {
        let w = format!("{name}.w");
        store.init_weight(rng, &w, in_dim, out_dim, relu_init);
        let b = bias.then(|| {
            let b = format!("{name}.b");
            store.init_zeros(&b, 1, out_dim);
            b
        });
        Self { w, b, in_dim, out_dim }
    }

    pub fn weight_name(&self) -> &str {
        &self.w
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let w = s.param(&self.w);
        let y = s.graph.matmul(x, w);
        match &self.b {
            Some(b) => {
                let b = s.param(b);
                s.graph.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output sizes");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                Linear::new(
                    store,
                    rng,
                    &format!("{name}.{i}"),
                    dims[i],
                    dims[i + 1],
                    i + 1 < n,
                    true,
                )
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, s: &mut Session, mut x: Var) -> Var {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(s, x);
            if i + 1 < n {
                x = s.graph.relu(x);
            }
        }
        x
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }
}

/// 2D convolution layer over batched pixel-row images.
#[derive(Clone, Debug)]
pub struct Conv2d {
    w: String,
    b: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        store.init_weight(rng, &w, kernel * kernel * in_channels, out_channels, true);
        store.init_zeros(&b, 1, out_channels);
        Self {
            w,
            b,
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    pub fn weight_name(&self) -> &str {
        &self.w
    }

    /// Returns the output and its spatial size.
    pub fn forward(
        &self,
        s: &mut Session,
        x: Var,
        n_images: usize,
        height: usize,
        width: usize,
    ) -> (Var, usize, usize) {
        let geom = ConvGeom {
            n_images,
            height,
            width,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.kernel / 2,
        };
        let w = s.param(&self.w);
        let b = s.param(&self.b);
        let y = s.graph.conv2d(x, w, b, geom);
        (y, geom.out_height(), geom.out_width())
    }
}
