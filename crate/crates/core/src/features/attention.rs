use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{Linear, Mlp};
use crate::autodiff::{ParamStore, RowMap, Session, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    /// Vector attention: per-head logits from an MLP over `q - k`.
    Subtraction,
    DotProduct,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionEncoding {
    Sinusoidal,
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub n_heads: usize,
    pub inner_dim: usize,
    pub n_epipolar_keys: usize,
    pub mode: AttentionMode,
    pub position: PositionEncoding,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            n_heads: 4,
            inner_dim: 32,
            n_epipolar_keys: 16,
            mode: AttentionMode::Subtraction,
            position: PositionEncoding::Sinusoidal,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.inner_dim == 0 || !self.inner_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config {
                key: "inner_dim".into(),
                message: format!("{} is not divisible by n_heads = {}", self.inner_dim, self.n_heads),
            });
        }
        if self.n_epipolar_keys == 0 {
            return Err(Error::Config {
                key: "n_epipolar_keys".into(),
                message: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// Sinusoidal encoding of the ordinal key index, `[n, dim]`.
pub fn sinusoidal_positions(n: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(n, dim);
    for s in 0..n {
        for k in 0..dim {
            let freq = 10000f64.powf(-((k / 2 * 2) as f64) / dim as f64);
            let a = s as f64 * freq;
            t.set(s, k, if k % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    t
}

/// Multi-head attention of one query row over a group of key rows.
#[derive(Clone, Debug)]
pub struct Mha {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    score: Option<Mlp>,
    heads: usize,
    dim: usize,
}

/// Output of [`Mha::forward`].
pub struct Attended {
    /// `[n_queries, dim]`.
    pub out: Var,
    /// `[n_queries * group, heads]`, softmax-normalized within each group.
    pub weights: Var,
}

impl Mha {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        mode: AttentionMode,
    ) -> Self {
        let lin = |store: &mut ParamStore, rng: &mut ChaCha8Rng, n: &str| {
            Linear::new(store, rng, &format!("{name}.{n}"), dim, dim, false, true)
        };
        let q = lin(store, rng, "q");
        let k = lin(store, rng, "k");
        let v = lin(store, rng, "v");
        let o = lin(store, rng, "o");
        let score = match mode {
            AttentionMode::Subtraction => Some(Mlp::new(store, rng, &format!("{name}.score"), &[dim, dim, heads])),
            AttentionMode::DotProduct => None,
        };
        Self {
            q,
            k,
            v,
            o,
            score,
            heads,
            dim,
        }
    }

    fn head_matrix(&self) -> Tensor {
        let dh = self.dim / self.heads;
        let mut m = Tensor::zeros(self.dim, self.heads);
        for c in 0..self.dim {
            m.set(c, c / dh, 1.0);
        }
        m
    }

    /// `query` is `[n, dim]`, `keys` is `[n * group, dim]` with the keys of
    /// query `r` in rows `r * group .. (r + 1) * group`. Masked keys get zero
    /// weight; a fully masked group attends to nothing and yields the output
    /// bias.
    pub fn forward(
        &self,
        s: &mut Session,
        query: Var,
        keys: Var,
        group: usize,
        mask: Option<Arc<Vec<bool>>>,
    ) -> Attended {
        let n = s.graph.shape(query).0;
        assert_eq!(s.graph.shape(keys).0, n * group, "key rows must be n_queries * group");
        let q = self.q.forward(s, query);
        let q = s.graph.rows(q, Arc::new(RowMap::repeat_each(n, group)));
        let k = self.k.forward(s, keys);
        let v = self.v.forward(s, keys);
        self.attend(s, q, k, v, n, group, mask)
    }

    /// Like [`Mha::forward`] with keys `select` applied to `source`. Keys are
    /// projected before the selection, so repeated rows cost nothing extra.
    pub fn forward_selected(
        &self,
        s: &mut Session,
        query: Var,
        source: Var,
        select: Arc<RowMap>,
        group: usize,
        mask: Option<Arc<Vec<bool>>>,
    ) -> Attended {
        let n = s.graph.shape(query).0;
        assert_eq!(select.n_out(), n * group, "key rows must be n_queries * group");
        let q = self.q.forward(s, query);
        let q = s.graph.rows(q, Arc::new(RowMap::repeat_each(n, group)));
        let k = self.k.forward(s, source);
        let k = s.graph.rows(k, select.clone());
        let v = self.v.forward(s, source);
        let v = s.graph.rows(v, select);
        self.attend(s, q, k, v, n, group, mask)
    }

    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        s: &mut Session,
        q: Var,
        k: Var,
        v: Var,
        n: usize,
        group: usize,
        mask: Option<Arc<Vec<bool>>>,
    ) -> Attended {
        let logits = match &self.score {
            Some(mlp) => {
                let d = s.graph.sub(q, k);
                mlp.forward(s, d)
            }
            None => {
                let prod = s.graph.mul(q, k);
                let hm = s.constant(self.head_matrix());
                let l = s.graph.matmul(prod, hm);
                s.graph.scale(l, 1.0 / ((self.dim / self.heads) as f64).sqrt())
            }
        };
        let weights = s.graph.group_softmax(logits, group, mask);
        let expand = s.constant(self.head_matrix().transpose());
        let w = s.graph.matmul(weights, expand);
        let wv = s.graph.mul(w, v);
        let pooled = s.graph.rows(wv, Arc::new(RowMap::group_sum(n, group)));
        let out = self.o.forward(s, pooled);
        Attended { out, weights }
    }
}

/// Stage-1 attention of a query feature over its epipolar keys `g_j^s + P(s)`.
pub fn fuse_epipolar(
    s: &mut Session,
    mha: &Mha,
    query: Var,
    keys: Var,
    positions: Var,
    n_keys: usize,
    mask: Option<Arc<Vec<bool>>>,
) -> Attended {
    let n = s.graph.shape(query).0;
    let tiled = s.graph.rows(positions, Arc::new(tile_rows(n_keys, n)));
    let keys = s.graph.add(keys, tiled);
    mha.forward(s, query, keys, n_keys, mask)
}

/// Stage-2 attention over per-view summaries, without positional encoding.
pub fn fuse_views(
    s: &mut Session,
    mha: &Mha,
    query: Var,
    summaries: Var,
    n_other: usize,
    mask: Option<Arc<Vec<bool>>>,
) -> Result<Attended> {
    if n_other == 0 {
        return Err(Error::invalid("view fusion needs at least one other view"));
    }
    Ok(mha.forward(s, query, summaries, n_other, mask))
}

/// Repeats a block of `block` rows `times` times.
pub(crate) fn tile_rows(block: usize, times: usize) -> RowMap {
    let mut m = RowMap::with_capacity(block, block * times, block * times);
    for _ in 0..times {
        for i in 0..block {
            m.push_select(i);
        }
    }
    m
}
