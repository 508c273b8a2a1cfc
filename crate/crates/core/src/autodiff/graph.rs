use std::sync::Arc;

use super::sparse::RowMap;
use super::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a batched 2D convolution over images stored one pixel per row.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    fn im2col(&self, x: &Tensor) -> Tensor {
        let (ho, wo) = (self.out_height(), self.out_width());
        let plen = self.patch_len();
        let cin = self.in_channels;
        let mut col = Tensor::zeros(self.n_images * ho * wo, plen);
        for n in 0..self.n_images {
            for oy in 0..ho {
                for ox in 0..wo {
                    let r = (n * ho + oy) * wo + ox;
                    let dst = col.row_mut(r);
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let src_row = (n * self.height + iy as usize) * self.width + ix as usize;
                            let off = (ky * self.kernel + kx) * cin;
                            dst[off..off + cin].copy_from_slice(x.row(src_row));
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, dcol: &Tensor) -> Tensor {
        let (ho, wo) = (self.out_height(), self.out_width());
        let cin = self.in_channels;
        let mut dx = Tensor::zeros(self.n_images * self.height * self.width, cin);
        for n in 0..self.n_images {
            for oy in 0..ho {
                for ox in 0..wo {
                    let r = (n * ho + oy) * wo + ox;
                    let src = dcol.row(r);
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let dst_row = (n * self.height + iy as usize) * self.width + ix as usize;
                            let off = (ky * self.kernel + kx) * cin;
                            let dst = dx.row_mut(dst_row);
                            for (d, s) in dst.iter_mut().zip(&src[off..off + cin]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    SumAll(Var),
    SumCols(Var),
    Rows(Var, Arc<RowMap>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        col: Tensor,
    },
    InstanceNorm {
        x: Var,
        n_images: usize,
        inv_std: Vec<f64>,
    },
    GroupSoftmax {
        x: Var,
        group: usize,
        mask: Option<Arc<Vec<bool>>>,
    },
    LogSumExpRows(Var),
    Reshape(Var),
    L2NormalizeRows(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode autodiff tape over [`Tensor`] values.
///
/// Nodes are appended in evaluation order, so the reverse of insertion order is
/// a valid topological order for the backward sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.rows(), ta.cols(), data).expect("shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// Adds a `[1, n]` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(bias));
        assert_eq!(tb.shape(), (1, ta.cols()), "add_row bias shape");
        let mut v = ta.clone();
        for r in 0..v.rows() {
            for (x, b) in v.row_mut(r).iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(v, Op::AddRow(a, bias), ng)
    }

    /// Multiplies row `r` of `a` by `s[r, 0]`.
    pub fn mul_col(&mut self, a: Var, s: Var) -> Var {
        let (ta, ts) = (self.value(a), self.value(s));
        assert_eq!(ts.shape(), (ta.rows(), 1), "mul_col scale shape");
        let mut v = ta.clone();
        for r in 0..v.rows() {
            let k = ts.get(r, 0);
            v.row_mut(r).iter_mut().for_each(|x| *x *= k);
        }
        let ng = self.ng(a) || self.ng(s);
        self.push(v, Op::MulCol(a, s), ng)
    }

    /// Multiplies `a` by the `[1, 1]` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let k = self.value(s).item();
        let v = self.value(a).map(|x| x * k);
        let ng = self.ng(a) || self.ng(s);
        self.push(v, Op::MulScalar(a, s), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        let ng = self.ng(a);
        self.push(v, Op::AddConst(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        self.push(v, Op::Log(a), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        let ng = self.ng(a);
        self.push(v, Op::Sqrt(a), ng)
    }

    /// `max(a, floor)`; entries at the floor receive no gradient.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let v = self.value(a).map(|x| x.max(floor));
        let ng = self.ng(a);
        self.push(v, Op::ClampMin(a, floor), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums as a `[m, 1]` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let v = Tensor::column((0..ta.rows()).map(|r| ta.row(r).iter().sum()).collect());
        let ng = self.ng(a);
        self.push(v, Op::SumCols(a), ng)
    }

    /// Applies a fixed [`RowMap`] to the rows of `a`.
    pub fn rows(&mut self, a: Var, map: Arc<RowMap>) -> Var {
        let v = map.apply(self.value(a));
        let ng = self.ng(a);
        self.push(v, Op::Rows(a, map), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p);
                assert_eq!(src.rows(), rows, "concat_cols row mismatch");
                let c = src.cols();
                v.row_mut(r)[off..off + c].copy_from_slice(src.row(r));
                off += c;
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = self.value(a);
        assert!(start + len <= ta.cols(), "slice_cols out of range");
        let mut v = Tensor::zeros(ta.rows(), len);
        for r in 0..ta.rows() {
            v.row_mut(r).copy_from_slice(&ta.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a, start), ng)
    }

    /// Batched convolution. `w` is `[kernel² · in_channels, out_channels]`,
    /// `b` is `[1, out_channels]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        assert_eq!(
            self.shape(x),
            (geom.n_images * geom.height * geom.width, geom.in_channels),
            "conv2d input shape"
        );
        assert_eq!(self.shape(w), (geom.patch_len(), geom.out_channels));
        let col = geom.im2col(self.value(x));
        let mut v = col.matmul(self.value(w));
        let bias = self.value(b).data().to_vec();
        for r in 0..v.rows() {
            for (o, bb) in v.row_mut(r).iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(v, Op::Conv2d { x, w, b, geom, col }, ng)
    }

    /// Per-image, per-channel normalization to zero mean and unit variance.
    pub fn instance_norm(&mut self, x: Var, n_images: usize, eps: f64) -> Var {
        let tx = self.value(x);
        let (rows, cols) = tx.shape();
        assert_eq!(rows % n_images, 0, "instance_norm rows not divisible");
        let block = rows / n_images;
        let mut v = Tensor::zeros(rows, cols);
        let mut inv_std = vec![0.0; n_images * cols];
        for n in 0..n_images {
            for c in 0..cols {
                let mut mean = 0.0;
                for r in 0..block {
                    mean += tx.get(n * block + r, c);
                }
                mean /= block as f64;
                let mut var = 0.0;
                for r in 0..block {
                    let d = tx.get(n * block + r, c) - mean;
                    var += d * d;
                }
                var /= block as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[n * cols + c] = is;
                for r in 0..block {
                    let rr = n * block + r;
                    v.set(rr, c, (tx.get(rr, c) - mean) * is);
                }
            }
        }
        let ng = self.ng(x);
        self.push(v, Op::InstanceNorm { x, n_images, inv_std }, ng)
    }

    /// Softmax over consecutive groups of `group` rows, independently per
    /// column. Masked rows (`mask[r] == false`) get exactly zero weight; a
    /// fully masked group yields all zeros.
    pub fn group_softmax(&mut self, x: Var, group: usize, mask: Option<Arc<Vec<bool>>>) -> Var {
        let tx = self.value(x);
        let (rows, cols) = tx.shape();
        assert!(group > 0 && rows % group == 0, "group_softmax grouping");
        if let Some(m) = &mask {
            assert_eq!(m.len(), rows, "group_softmax mask length");
        }
        let keep = |r: usize| mask.as_ref().is_none_or(|m| m[r]);
        let mut v = Tensor::zeros(rows, cols);
        for g in 0..rows / group {
            for c in 0..cols {
                let mut mx = f64::NEG_INFINITY;
                for k in 0..group {
                    let r = g * group + k;
                    if keep(r) {
                        mx = mx.max(tx.get(r, c));
                    }
                }
                if mx == f64::NEG_INFINITY {
                    continue;
                }
                let mut total = 0.0;
                for k in 0..group {
                    let r = g * group + k;
                    if keep(r) {
                        let e = (tx.get(r, c) - mx).exp();
                        v.set(r, c, e);
                        total += e;
                    }
                }
                for k in 0..group {
                    let r = g * group + k;
                    let e = v.get(r, c);
                    v.set(r, c, e / total);
                }
            }
        }
        let ng = self.ng(x);
        self.push(v, Op::GroupSoftmax { x, group, mask }, ng)
    }

    /// Same row-major data viewed as `[rows, cols]`.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = Tensor::from_vec(rows, cols, self.value(a).data().to_vec()).expect("reshape size mismatch");
        let ng = self.ng(a);
        self.push(v, Op::Reshape(a), ng)
    }

    /// Row-wise `log Σ exp`, stabilized by max subtraction. Returns `[m, 1]`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let v = Tensor::column(
            (0..tx.rows())
                .map(|r| {
                    let row = tx.row(r);
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    mx + row.iter().map(|&z| (z - mx).exp()).sum::<f64>().ln()
                })
                .collect(),
        );
        let ng = self.ng(x);
        self.push(v, Op::LogSumExpRows(x), ng)
    }

    /// Scales every row to unit Euclidean norm (norm floored at `eps`).
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let tx = self.value(x);
        let mut v = tx.clone();
        let mut norms = Vec::with_capacity(tx.rows());
        for r in 0..tx.rows() {
            let n = tx.row(r).iter().map(|a| a * a).sum::<f64>().sqrt().max(eps);
            norms.push(n);
            v.row_mut(r).iter_mut().for_each(|a| *a /= n);
        }
        let ng = self.ng(x);
        self.push(v, Op::L2NormalizeRows(x, norms), ng)
    }

    /// Reverse sweep from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for (x, y) in ga.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *x *= y;
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = g.clone();
                    for (x, y) in gb.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *x *= y;
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*bias) {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::MulCol(a, s) => {
                let (ta, ts) = (self.value(*a), self.value(*s));
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let k = ts.get(r, 0);
                        ga.row_mut(r).iter_mut().for_each(|x| *x *= k);
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*s) {
                    let gs = Tensor::column(
                        (0..g.rows())
                            .map(|r| g.row(r).iter().zip(ta.row(r)).map(|(x, y)| x * y).sum())
                            .collect(),
                    );
                    self.accumulate(grads, *s, gs);
                }
            }
            Op::MulScalar(a, s) => {
                let k = self.value(*s).item();
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.map(|x| x * k));
                }
                if self.ng(*s) {
                    let d: f64 = g.data().iter().zip(self.value(*a).data()).map(|(x, y)| x * y).sum();
                    self.accumulate(grads, *s, Tensor::scalar(d));
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.map(|x| x * k)),
            Op::AddConst(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let mut ga = g.clone();
                for (x, y) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                    if *y <= 0.0 {
                        *x = 0.0;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                let mut ga = g.clone();
                for (x, y) in ga.data_mut().iter_mut().zip(out.data()) {
                    *x *= y;
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Log(a) => {
                let mut ga = g.clone();
                for (x, y) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                    *x /= y;
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sqrt(a) => {
                let mut ga = g.clone();
                for (x, y) in ga.data_mut().iter_mut().zip(out.data()) {
                    *x *= 0.5 / y;
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ClampMin(a, floor) => {
                let mut ga = g.clone();
                for (x, y) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                    if *y < *floor {
                        *x = 0.0;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Tensor::filled(r, c, g.item()));
            }
            Op::SumCols(a) => {
                let (r, c) = self.shape(*a);
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    let k = g.get(i, 0);
                    ga.row_mut(i).iter_mut().for_each(|x| *x = k);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Tensor::from_vec(r, c, g.data().to_vec()).expect("shape"));
            }
            Op::Rows(a, map) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, map.apply_transpose(g));
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, c) = self.shape(p);
                    if self.ng(p) {
                        let mut gp = Tensor::zeros(rows, c);
                        for r in 0..rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + c]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    off += c;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                let len = g.cols();
                for r in 0..rows {
                    ga.row_mut(r)[*start..*start + len].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Conv2d { x, w, b, geom, col } => {
                if self.ng(*w) {
                    self.accumulate(grads, *w, col.t_matmul(g));
                }
                if self.ng(*b) {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
                if self.ng(*x) {
                    let dcol = g.matmul_t(self.value(*w));
                    self.accumulate(grads, *x, geom.col2im(&dcol));
                }
            }
            Op::InstanceNorm { x, n_images, inv_std } => {
                let (rows, cols) = out.shape();
                let block = rows / n_images;
                let mut gx = Tensor::zeros(rows, cols);
                for n in 0..*n_images {
                    for c in 0..cols {
                        let mut mg = 0.0;
                        let mut mgy = 0.0;
                        for r in 0..block {
                            let rr = n * block + r;
                            mg += g.get(rr, c);
                            mgy += g.get(rr, c) * out.get(rr, c);
                        }
                        mg /= block as f64;
                        mgy /= block as f64;
                        let is = inv_std[n * cols + c];
                        for r in 0..block {
                            let rr = n * block + r;
                            gx.set(rr, c, is * (g.get(rr, c) - mg - out.get(rr, c) * mgy));
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::GroupSoftmax { x, group, mask } => {
                let (rows, cols) = out.shape();
                let mut gx = Tensor::zeros(rows, cols);
                for gi in 0..rows / group {
                    for c in 0..cols {
                        let mut dot = 0.0;
                        for k in 0..*group {
                            let r = gi * group + k;
                            dot += g.get(r, c) * out.get(r, c);
                        }
                        for k in 0..*group {
                            let r = gi * group + k;
                            if mask.as_ref().is_some_and(|m| !m[r]) {
                                continue;
                            }
                            gx.set(r, c, out.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LogSumExpRows(x) => {
                let tx = self.value(*x);
                let mut gx = Tensor::zeros(tx.rows(), tx.cols());
                for r in 0..tx.rows() {
                    let lse = out.get(r, 0);
                    let k = g.get(r, 0);
                    for (d, &z) in gx.row_mut(r).iter_mut().zip(tx.row(r)) {
                        *d = k * (z - lse).exp();
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::L2NormalizeRows(x, norms) => {
                let mut gx = Tensor::zeros(out.rows(), out.cols());
                for (r, &n) in norms.iter().enumerate() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yy), &gg) in gx.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *d = (gg - yy * dot) / n;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_grad(build: impl Fn(&mut Graph, Var) -> Var, input: Tensor) {
        let mut g = Graph::new();
        let x = g.variable(input.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic = grads
            .get(x)
            .cloned()
            .unwrap_or(Tensor::zeros(input.rows(), input.cols()));
        let eps = 1e-6;
        for i in 0..input.len() {
            let mut plus = input.clone();
            plus.data_mut()[i] += eps;
            let mut minus = input.clone();
            minus.data_mut()[i] -= eps;
            let f = |t: Tensor| {
                let mut g = Graph::new();
                let x = g.variable(t);
                let l = build(&mut g, x);
                g.value(l).item()
            };
            let fd = (f(plus) - f(minus)) / (2.0 * eps);
            let a = analytic.data()[i];
            assert!(
                (fd - a).abs() <= 1e-6 * (1.0 + fd.abs().max(a.abs())),
                "entry {i}: finite difference {fd} vs analytic {a}"
            );
        }
    }

    fn probe(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut s = seed;
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
        let (r, c) = g.shape(y);
        let w = g.constant(probe(r, c, seed));
        let m = g.mul(y, w);
        g.sum_all(m)
    }

    #[test]
    fn conv2d_gradient() {
        let geom = ConvGeom {
            n_images: 2,
            height: 5,
            width: 4,
            in_channels: 2,
            out_channels: 3,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        check_grad(
            |g, x| {
                let w = g.constant(probe(18, 3, 5));
                let b = g.constant(probe(1, 3, 6));
                let y = g.conv2d(x, w, b, geom);
                weighted_sum(g, y, 9)
            },
            probe(40, 2, 1),
        );
        check_grad(
            |g, w| {
                let x = g.constant(probe(40, 2, 1));
                let b = g.constant(probe(1, 3, 6));
                let y = g.conv2d(x, w, b, geom);
                weighted_sum(g, y, 9)
            },
            probe(18, 3, 5),
        );
    }

    #[test]
    fn instance_norm_gradient() {
        check_grad(
            |g, x| {
                let y = g.instance_norm(x, 2, 1e-5);
                weighted_sum(g, y, 3)
            },
            probe(12, 3, 2),
        );
    }

    #[test]
    fn group_softmax_gradient_and_mask() {
        let mask = Arc::new(vec![true, false, true, true, true, true]);
        check_grad(
            |g, x| {
                let y = g.group_softmax(x, 3, Some(mask.clone()));
                weighted_sum(g, y, 4)
            },
            probe(6, 2, 8),
        );
        let mut g = Graph::new();
        let x = g.constant(probe(6, 2, 8));
        let y = g.group_softmax(x, 3, Some(mask));
        let t = g.value(y);
        assert_eq!(t.get(1, 0), 0.0);
        assert!((t.get(0, 1) + t.get(2, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_normalize_and_misc_gradients() {
        check_grad(
            |g, x| {
                let y = g.logsumexp_rows(x);
                weighted_sum(g, y, 1)
            },
            probe(4, 5, 3),
        );
        check_grad(
            |g, x| {
                let y = g.l2_normalize_rows(x, 1e-12);
                weighted_sum(g, y, 2)
            },
            probe(4, 5, 4),
        );
        check_grad(
            |g, x| {
                let s = g.sum_cols(x);
                let e = g.exp(s);
                let h = g.mul_col(x, e);
                let c = g.concat_cols(&[h, x]);
                let sl = g.slice_cols(c, 2, 5);
                let q = g.add_const(sl, 3.0);
                let l = g.log(q);
                let r = g.sqrt(q);
                let z = g.sub(l, r);
                weighted_sum(g, z, 7)
            },
            probe(3, 4, 5),
        );
    }
}
