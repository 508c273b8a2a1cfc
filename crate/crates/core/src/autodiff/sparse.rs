use super::tensor::Tensor;

/// A fixed linear map between row spaces: `out[r] = Σ w · in[i]` over the
/// entries of row `r`.
///
/// Bilinear sampling, row repetition, gathering and pooling are all instances
/// of this map, so a single differentiable op covers them.
#[derive(Clone, Debug, Default)]
pub struct RowMap {
    n_in: usize,
    offsets: Vec<usize>,
    index: Vec<u32>,
    weight: Vec<f64>,
}

impl RowMap {
    pub fn new(n_in: usize) -> Self {
        Self {
            n_in,
            offsets: vec![0],
            index: Vec::new(),
            weight: Vec::new(),
        }
    }

    pub fn with_capacity(n_in: usize, rows: usize, entries: usize) -> Self {
        let mut offsets = Vec::with_capacity(rows + 1);
        offsets.push(0);
        Self {
            n_in,
            offsets,
            index: Vec::with_capacity(entries),
            weight: Vec::with_capacity(entries),
        }
    }

    /// Appends one output row built from `(input_row, weight)` entries.
    pub fn push_row<I: IntoIterator<Item = (usize, f64)>>(&mut self, entries: I) {
        for (i, w) in entries {
            debug_assert!(i < self.n_in, "row map index {} >= {}", i, self.n_in);
            self.index.push(i as u32);
            self.weight.push(w);
        }
        self.offsets.push(self.index.len());
    }

    /// Output row selecting a single input row.
    pub fn push_select(&mut self, i: usize) {
        self.push_row([(i, 1.0)]);
    }

    pub fn push_empty(&mut self) {
        self.offsets.push(self.index.len());
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.offsets[r], self.offsets[r + 1]);
        self.index[a..b]
            .iter()
            .zip(&self.weight[a..b])
            .map(|(&i, &w)| (i as usize, w))
    }

    pub fn apply(&self, input: &Tensor) -> Tensor {
        assert_eq!(input.rows(), self.n_in, "row map input rows");
        let cols = input.cols();
        let mut out = Tensor::zeros(self.n_out(), cols);
        for r in 0..self.n_out() {
            let (a, b) = (self.offsets[r], self.offsets[r + 1]);
            let dst = out.row_mut(r);
            for e in a..b {
                let w = self.weight[e];
                let src = input.row(self.index[e] as usize);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }

    /// Adjoint application: scatters `grad_out` back into input rows.
    pub fn apply_transpose(&self, grad_out: &Tensor) -> Tensor {
        let cols = grad_out.cols();
        let mut out = Tensor::zeros(self.n_in, cols);
        for r in 0..self.n_out() {
            let (a, b) = (self.offsets[r], self.offsets[r + 1]);
            let src = grad_out.row(r);
            for e in a..b {
                let w = self.weight[e];
                let dst = out.row_mut(self.index[e] as usize);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }

    /// Sums consecutive groups of `group` input rows.
    pub fn group_sum(n_groups: usize, group: usize) -> Self {
        let mut m = Self::with_capacity(n_groups * group, n_groups, n_groups * group);
        for g in 0..n_groups {
            m.push_row((0..group).map(|k| (g * group + k, 1.0)));
        }
        m
    }

    /// Repeats each input row `times` times consecutively.
    pub fn repeat_each(n_in: usize, times: usize) -> Self {
        let mut m = Self::with_capacity(n_in, n_in * times, n_in * times);
        for i in 0..n_in {
            for _ in 0..times {
                m.push_select(i);
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transpose_is_adjoint() {
        let mut m = RowMap::new(3);
        m.push_row([(0, 0.5), (2, 2.0)]);
        m.push_select(1);
        m.push_empty();
        let x = Tensor::from_vec(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let y = Tensor::from_vec(3, 2, vec![0.3, -1., 2., 0.7, 9., 9.]).unwrap();
        let mx = m.apply(&x);
        let mty = m.apply_transpose(&y);
        let lhs: f64 = mx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(mty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        assert_eq!(mx.row(2), &[0.0, 0.0]);
    }
}
