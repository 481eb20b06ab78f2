//! Define-by-run reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is an append-only tape. Every operation pushes a node holding
//! its forward value and a record of its parents; [`Graph::backward`] walks the
//! tape in reverse from a scalar root. The graph is meant to be rebuilt for
//! every training step and dropped afterwards.

use crate::error::{Error, Result};
use crate::matrix::{gemm, Matrix, Trans};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    ClampMin(Var, f64),
    RowSoftmax(Var),
    RowNorm(Var),
    RowNormalize(Var),
    /// `perm[r * cols + j]` is the input row that lands at output `(r, j)`.
    SortColumns(Var, Vec<usize>),
    Sum(Var),
    RowSum(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
    requires_grad: bool,
    /// True when this node or any ancestor requires a gradient.
    tracks_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Adds an input node. Gradients are stored only when `requires_grad`.
    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| Matrix::zeros(value.rows(), value.cols()));
        self.nodes.push(Node {
            value,
            grad,
            op: Op::Leaf,
            requires_grad,
            tracks_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of `v`, if `v` takes part in differentiation.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.fill(0.0);
            }
        }
    }

    fn push(&mut self, value: Matrix, op: Op, parents: &[Var]) -> Var {
        let tracks_grad = parents.iter().any(|p| self.nodes[p.0].tracks_grad);
        let grad = tracks_grad.then(|| Matrix::zeros(value.rows(), value.cols()));
        self.nodes.push(Node {
            value,
            grad,
            op,
            requires_grad: tracks_grad,
            tracks_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `1 x n` row vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(Error::Dimension {
                op: "add_row",
                left: sa,
                right: sr,
            });
        }
        let bias = self.value(row).as_slice().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(&bias) {
                *x += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| k * x);
        self.push(value, Op::Scale(a, k), &[a])
    }

    /// Rectifier; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a), &[a])
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let input = self.value(a);
        if let Some((index, &value)) = input
            .as_slice()
            .iter()
            .enumerate()
            .find(|(_, &x)| !(x > 0.0))
        {
            return Err(Error::Domain {
                op: "log",
                index,
                value,
            });
        }
        let value = input.map(f64::ln);
        Ok(self.push(value, Op::Log(a), &[a]))
    }

    /// `max(a, floor)` elementwise; gradient passes only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).map(|x| x.max(floor));
        self.push(value, Op::ClampMin(a, floor), &[a])
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let input = self.value(a);
        let mut value = input.clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        self.push(value, Op::RowSoftmax(a), &[a])
    }

    /// Euclidean norm of each row, as an `m x 1` column.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let input = self.value(a);
        let value = Matrix::from_fn(input.rows(), 1, |i, _| l2(input.row(i)));
        self.push(value, Op::RowNorm(a), &[a])
    }

    /// Scales every row to unit Euclidean norm.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let input = self.value(a);
        let mut value = input.clone();
        for i in 0..value.rows() {
            let n = l2(input.row(i));
            if !(n > 0.0) {
                return Err(Error::Degenerate(format!("row {i} has zero norm")));
            }
            value.row_mut(i).iter_mut().for_each(|x| *x /= n);
        }
        Ok(self.push(value, Op::RowNormalize(a), &[a]))
    }

    /// Sorts each column ascending. Ties keep their original row order, and
    /// the permutation is frozen for the backward pass.
    pub fn sort_columns(&mut self, a: Var) -> Var {
        let input = self.value(a);
        let (rows, cols) = input.shape();
        let mut value = Matrix::zeros(rows, cols);
        let mut perm = vec![0usize; rows * cols];
        let mut order: Vec<usize> = Vec::with_capacity(rows);
        for j in 0..cols {
            order.clear();
            order.extend(0..rows);
            order.sort_by(|&x, &y| input.get(x, j).total_cmp(&input.get(y, j)));
            for (r, &src) in order.iter().enumerate() {
                value.set(r, j, input.get(src, j));
                perm[r * cols + j] = src;
            }
        }
        self.push(value, Op::SortColumns(a, perm), &[a])
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum of each row, as an `m x 1` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let input = self.value(a);
        let value = Matrix::from_fn(input.rows(), 1, |i, _| input.row(i).iter().sum());
        self.push(value, Op::RowSum(a), &[a])
    }

    /// Propagates d(root)/d(node) into every node that tracks gradients.
    ///
    /// Gradients accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.shape(root) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        if !self.nodes[root.0].tracks_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Matrix>> = (0..=root.0).map(|_| None).collect();
        pending[root.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = pending[idx].take() else {
                continue;
            };
            if let Some(stored) = self.nodes[idx].grad.as_mut() {
                stored.add_assign(&g);
            }
            self.propagate(idx, &g, &mut pending);
        }
        Ok(())
    }

    fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].tracks_grad
    }

    fn propagate(&self, idx: usize, g: &Matrix, pending: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.tracks(*a) {
                    let slot = slot(pending, *a, av.shape());
                    gemm(1.0, g, Trans::No, bv, Trans::Yes, 1.0, slot);
                }
                if self.tracks(*b) {
                    let slot = slot(pending, *b, bv.shape());
                    gemm(1.0, av, Trans::Yes, g, Trans::No, 1.0, slot);
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if self.tracks(v) {
                        slot(pending, v, g.shape()).axpy(sign, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if self.tracks(v) {
                        slot(pending, v, g.shape()).axpy(sign, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.tracks(*a) {
                    let s = slot(pending, *a, g.shape());
                    for ((s, g), y) in s.as_mut_slice().iter_mut().zip(g.as_slice()).zip(bv.as_slice()) {
                        *s += g * y;
                    }
                }
                if self.tracks(*b) {
                    let s = slot(pending, *b, g.shape());
                    for ((s, g), x) in s.as_mut_slice().iter_mut().zip(g.as_slice()).zip(av.as_slice()) {
                        *s += g * x;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.tracks(*a) {
                    slot(pending, *a, g.shape()).add_assign(g);
                }
                if self.tracks(*row) {
                    let s = slot(pending, *row, (1, g.cols()));
                    for i in 0..g.rows() {
                        for (s, v) in s.as_mut_slice().iter_mut().zip(g.row(i)) {
                            *s += v;
                        }
                    }
                }
            }
            Op::Scale(a, k) => {
                if self.tracks(*a) {
                    slot(pending, *a, g.shape()).axpy(*k, g);
                }
            }
            Op::Relu(a) => {
                if self.tracks(*a) {
                    let x = self.value(*a);
                    let s = slot(pending, *a, g.shape());
                    for ((s, g), x) in s.as_mut_slice().iter_mut().zip(g.as_slice()).zip(x.as_slice()) {
                        if *x > 0.0 {
                            *s += g;
                        }
                    }
                }
            }
            Op::Exp(a) => {
                if self.tracks(*a) {
                    let s = slot(pending, *a, g.shape());
                    for ((s, g), y) in s.as_mut_slice().iter_mut().zip(g.as_slice()).zip(out.as_slice()) {
                        *s += g * y;
                    }
                }
            }
            Op::Log(a) => {
                if self.tracks(*a) {
                    let x = self.value(*a);
                    let s = slot(pending, *a, g.shape());
                    for ((s, g), x) in s.as_mut_slice().iter_mut().zip(g.as_slice()).zip(x.as_slice()) {
                        *s += g / x;
                    }
                }
            }
            Op::ClampMin(a, floor) => {
                if self.tracks(*a) {
                    let x = self.value(*a);
                    let s = slot(pending, *a, g.shape());
                    for ((s, g), x) in s.as_mut_slice().iter_mut().zip(g.as_slice()).zip(x.as_slice()) {
                        if *x > *floor {
                            *s += g;
                        }
                    }
                }
            }
            Op::RowSoftmax(a) => {
                if self.tracks(*a) {
                    let s = slot(pending, *a, g.shape());
                    for i in 0..g.rows() {
                        let (gr, yr) = (g.row(i), out.row(i));
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for ((s, g), y) in s.row_mut(i).iter_mut().zip(gr).zip(yr) {
                            *s += y * (g - dot);
                        }
                    }
                }
            }
            Op::RowNorm(a) => {
                if self.tracks(*a) {
                    let x = self.value(*a);
                    let s = slot(pending, *a, x.shape());
                    for i in 0..x.rows() {
                        let n = out.get(i, 0);
                        if n > 0.0 {
                            let coef = g.get(i, 0) / n;
                            for (s, x) in s.row_mut(i).iter_mut().zip(x.row(i)) {
                                *s += coef * x;
                            }
                        }
                    }
                }
            }
            Op::RowNormalize(a) => {
                if self.tracks(*a) {
                    let x = self.value(*a);
                    let s = slot(pending, *a, x.shape());
                    for i in 0..x.rows() {
                        let n = l2(x.row(i));
                        let (gr, yr) = (g.row(i), out.row(i));
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for ((s, g), y) in s.row_mut(i).iter_mut().zip(gr).zip(yr) {
                            *s += (g - y * dot) / n;
                        }
                    }
                }
            }
            Op::SortColumns(a, perm) => {
                if self.tracks(*a) {
                    let cols = g.cols();
                    let s = slot(pending, *a, g.shape());
                    for r in 0..g.rows() {
                        for j in 0..cols {
                            let src = perm[r * cols + j];
                            let cur = s.get(src, j);
                            s.set(src, j, cur + g.get(r, j));
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if self.tracks(*a) {
                    let shape = self.shape(*a);
                    let k = g.item();
                    slot(pending, *a, shape)
                        .as_mut_slice()
                        .iter_mut()
                        .for_each(|s| *s += k);
                }
            }
            Op::RowSum(a) => {
                if self.tracks(*a) {
                    let shape = self.shape(*a);
                    let s = slot(pending, *a, shape);
                    for i in 0..shape.0 {
                        let k = g.get(i, 0);
                        s.row_mut(i).iter_mut().for_each(|s| *s += k);
                    }
                }
            }
        }
    }
}

fn slot(pending: &mut [Option<Matrix>], v: Var, shape: (usize, usize)) -> &mut Matrix {
    pending[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

pub(crate) fn l2(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Matrix::identity(2));
        let x = g.constant(m(&[&[1.0, -2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::zeros(2, 3));
        let b = g.constant(Matrix::zeros(2, 3));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("(2, 3) vs (2, 3)"), "{msg}");
    }

    #[test]
    fn relu_forward_and_grad() {
        let mut g = Graph::new();
        let x = g.leaf(m(&[&[-1.0, 0.0, 2.0]]), true);
        let y = g.relu(x);
        assert_eq!(g.value(y).as_slice(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().as_slice(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn log_rejects_nonpositive_with_index() {
        let mut g = Graph::new();
        let x = g.constant(m(&[&[1.0, 2.0, 0.0]]));
        match g.log(x) {
            Err(Error::Domain { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn log_exp_inverse() {
        let mut g = Graph::new();
        let x = g.constant(m(&[&[-3.2, 0.0, 0.7, 5.5]]));
        let e = g.exp(x);
        let l = g.log(e).unwrap();
        assert!(g.value(l).max_abs_diff(g.value(x)) < 1e-12);
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let mut g = Graph::new();
        let x = g.constant(m(&[&[0.0, 0.0], &[1000.0, 0.0]]));
        let y = g.row_softmax(x);
        let v = g.value(y);
        assert_eq!(v.row(0), &[0.5, 0.5]);
        assert!((v.get(1, 0) - 1.0).abs() < 1e-12);
        assert!(v.get(1, 1) >= 0.0 && v.get(1, 1) < 1e-300);
        assert!(v.is_finite());
    }

    #[test]
    fn sort_scatters_gradient_through_permutation() {
        let mut g = Graph::new();
        let x = g.leaf(m(&[&[3.0], &[1.0], &[2.0]]), true);
        let s = g.sort_columns(x);
        assert_eq!(g.value(s).as_slice(), &[1.0, 2.0, 3.0]);
        // upstream [a, b, c] = [10, 20, 30] via a weighted sum
        let w = g.constant(m(&[&[10.0], &[20.0], &[30.0]]));
        let p = g.mul(s, w).unwrap();
        let r = g.sum(p);
        g.backward(r).unwrap();
        assert_eq!(g.grad(x).unwrap().as_slice(), &[30.0, 10.0, 20.0]);
    }

    #[test]
    fn sort_is_identity_on_sorted_input() {
        let mut g = Graph::new();
        let x = g.leaf(m(&[&[1.0, -1.0], &[2.0, 0.0], &[3.0, 4.0]]), true);
        let s = g.sort_columns(x);
        assert_eq!(g.value(s), g.value(x));
        let w = g.constant(Matrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64));
        let p = g.mul(s, w).unwrap();
        let r = g.sum(p);
        g.backward(r).unwrap();
        assert_eq!(g.grad(x).unwrap(), g.value(w));
    }

    #[test]
    fn sum_gives_ones_and_half_square_gives_x() {
        let mut g = Graph::new();
        let data = m(&[&[1.5, -2.0], &[0.25, 3.0], &[7.0, -0.5]]);
        let x = g.leaf(data.clone(), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().as_slice().iter().all(|&v| v == 1.0));

        let mut g = Graph::new();
        let x = g.leaf(data.clone(), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let half = g.scale(s, 0.5);
        g.backward(half).unwrap();
        assert_eq!(g.grad(x).unwrap(), &data);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::zeros(2, 2), true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let mut g = Graph::new();
        let x = g.leaf(m(&[&[1.0, 2.0]]), true);
        let y = g.scale(x, 3.0);
        let s = g.sum(y);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().as_slice(), &[6.0, 6.0]);
        g.zero_grad();
        assert_eq!(g.grad(x).unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn constants_have_no_gradient_slot() {
        let mut g = Graph::new();
        let c = g.constant(m(&[&[1.0]]));
        let x = g.leaf(m(&[&[2.0]]), true);
        let p = g.mul(c, x).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().item(), 1.0);
    }

    #[test]
    fn add_row_broadcasts_and_reduces() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::zeros(3, 2), true);
        let b = g.leaf(m(&[&[1.0, -1.0]]), true);
        let y = g.add_row(x, b).unwrap();
        assert_eq!(g.value(y).row(2), &[1.0, -1.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap().as_slice(), &[3.0, 3.0]);
        let bad = g.constant(Matrix::zeros(1, 3));
        assert!(g.add_row(x, bad).is_err());
    }

    #[test]
    fn row_normalize_rejects_zero_rows() {
        let mut g = Graph::new();
        let x = g.constant(m(&[&[1.0, 1.0], &[0.0, 0.0]]));
        assert!(matches!(g.row_normalize(x), Err(Error::Degenerate(_))));
    }

    #[test]
    fn row_norm_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(m(&[&[0.0, 0.0], &[3.0, 4.0]]), true);
        let n = g.row_norm(x);
        assert_eq!(g.value(n).as_slice(), &[0.0, 5.0]);
        let s = g.sum(n);
        g.backward(s).unwrap();
        let grad = g.grad(x).unwrap().as_slice();
        assert_eq!(&grad[..2], &[0.0, 0.0]);
        assert!((grad[2] - 0.6).abs() < 1e-15 && (grad[3] - 0.8).abs() < 1e-15);
    }
}
