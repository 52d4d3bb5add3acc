//! Matrix-valued reverse-mode tape.
//!
//! Adjoints are themselves recorded as tape nodes, so the result of one
//! backward sweep can be differentiated again. That second sweep is what the
//! critic's gradient penalty needs.

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    MatMulTN(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    SumRows(Var),
    BroadcastRows(Var),
    SumCols(Var),
    BroadcastCols(Var),
    Sum(Var),
    BroadcastScalar(Var),
    /// Input and scale; the shift does not affect the adjoint.
    Affine(Var, f64),
    Tanh(Var),
    Softplus(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Recip(Var),
    Square(Var),
    Sqrt(Var),
    Minimum(Var, Var),
    Clamp(Var, f64, f64),
    /// Input and first column.
    SliceCols(Var, usize),
    /// Input and first column of the padded block.
    PadCols(Var, usize),
    ConcatCols(Var, Var),
    Transpose(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoint handles produced by [`Tape::gradients`].
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<Var>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Var> {
        self.adjoints.get(v.0).copied().flatten()
    }

    /// Number of nodes whose adjoint rule ran during the sweep.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, a: Var) -> bool {
        self.nodes[a.0].requires_grad
    }

    fn rg2(&self, a: Var, b: Var) -> bool {
        self.rg(a) || self.rg(b)
    }

    /// Leaf that receives gradients.
    pub fn variable(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg2(a, b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        let rg = self.rg2(a, b);
        self.push(v, Op::MatMulNT(a, b), rg)
    }

    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_tn(self.value(b));
        let rg = self.rg2(a, b);
        self.push(v, Op::MatMulTN(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg2(a, b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg2(a, b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg2(a, b);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// `a` (n x m) plus the 1 x m row `row` on every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a).add_row(self.value(row));
        let rg = self.rg2(a, row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_rows();
        let rg = self.rg(a);
        self.push(v, Op::SumRows(a), rg)
    }

    pub fn broadcast_rows(&mut self, row: Var, n: usize) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        let mut data = Vec::with_capacity(n * r.cols());
        for _ in 0..n {
            data.extend_from_slice(r.as_slice());
        }
        let v = Matrix::from_vec(n, r.cols(), data);
        let rg = self.rg(row);
        self.push(v, Op::BroadcastRows(row), rg)
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_cols();
        let rg = self.rg(a);
        self.push(v, Op::SumCols(a), rg)
    }

    pub fn broadcast_cols(&mut self, col: Var, m: usize) -> Var {
        let c = self.value(col);
        assert_eq!(c.cols(), 1);
        let mut data = Vec::with_capacity(c.rows() * m);
        for &x in c.as_slice() {
            data.extend(std::iter::repeat_n(x, m));
        }
        let v = Matrix::from_vec(c.rows(), m, data);
        let rg = self.rg(col);
        self.push(v, Op::BroadcastCols(col), rg)
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn broadcast_scalar(&mut self, s: Var, rows: usize, cols: usize) -> Var {
        let v = Matrix::filled(rows, cols, self.value(s).item());
        let rg = self.rg(s);
        self.push(v, Op::BroadcastScalar(s), rg)
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(a).map(|x| scale * x + shift);
        let rg = self.rg(a);
        self.push(v, Op::Affine(a, scale), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.affine(a, c, 0.0)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        let rg = self.rg(a);
        self.push(v, Op::Softplus(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(v, Op::Log(a), rg)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / x);
        let rg = self.rg(a);
        self.push(v, Op::Recip(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(v, Op::Square(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        let rg = self.rg(a);
        self.push(v, Op::Sqrt(a), rg)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), f64::min);
        let rg = self.rg2(a, b);
        self.push(v, Op::Minimum(a, b), rg)
    }

    /// Hard clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(v, Op::Clamp(a, lo, hi), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.clamp(a, 0.0, f64::INFINITY)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice_cols(start, end);
        let rg = self.rg(a);
        self.push(v, Op::SliceCols(a, start), rg)
    }

    /// Places `a` at column offset `start` inside a zero matrix `total` columns wide.
    pub fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Var {
        let src = self.value(a);
        let mut v = Matrix::zeros(src.rows(), total);
        for r in 0..src.rows() {
            v.row_mut(r)[start..start + src.cols()].copy_from_slice(src.row(r));
        }
        let rg = self.rg(a);
        self.push(v, Op::PadCols(a, start), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).concat_cols(self.value(b));
        let rg = self.rg2(a, b);
        self.push(v, Op::ConcatCols(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a), rg)
    }

    /// Reverse sweep from `output`, seeded with `seed` (ones when `None`,
    /// which requires a 1x1 output).
    ///
    /// Every adjoint is recorded on the tape, so adjoints may be used as
    /// inputs to further operations and differentiated again.
    pub fn gradients(&mut self, output: Var, seed: Option<Matrix>) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::usage("output node is not on this tape"));
        }
        let out_shape = self.value(output).shape();
        let seed = match seed {
            Some(s) => {
                if s.shape() != out_shape {
                    return Err(Error::usage(format!(
                        "adjoint shape {:?} does not match output shape {:?}",
                        s.shape(),
                        out_shape
                    )));
                }
                s
            }
            None => {
                if out_shape != (1, 1) {
                    return Err(Error::usage("implicit seed requires a scalar output"));
                }
                Matrix::scalar(1.0)
            }
        };
        let mut adj: Vec<Option<Var>> = vec![None; output.0 + 1];
        adj[output.0] = Some(self.constant(seed));
        let mut visited = 0;

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i] else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            visited += 1;
            let op = self.nodes[i].op;
            let y = Var(i);
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.rg(a) {
                        let c = self.matmul_nt(g, b);
                        self.accumulate(&mut adj, a, c);
                    }
                    if self.rg(b) {
                        let c = self.matmul_tn(a, g);
                        self.accumulate(&mut adj, b, c);
                    }
                }
                Op::MatMulNT(a, b) => {
                    // y = a bᵀ
                    if self.rg(a) {
                        let c = self.matmul(g, b);
                        self.accumulate(&mut adj, a, c);
                    }
                    if self.rg(b) {
                        let c = self.matmul_tn(g, a);
                        self.accumulate(&mut adj, b, c);
                    }
                }
                Op::MatMulTN(a, b) => {
                    // y = aᵀ b
                    if self.rg(a) {
                        let c = self.matmul_nt(b, g);
                        self.accumulate(&mut adj, a, c);
                    }
                    if self.rg(b) {
                        let c = self.matmul(a, g);
                        self.accumulate(&mut adj, b, c);
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, a, g);
                    self.accumulate(&mut adj, b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adj, a, g);
                    if self.rg(b) {
                        let c = self.neg(g);
                        self.accumulate(&mut adj, b, c);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(a) {
                        let c = self.mul(g, b);
                        self.accumulate(&mut adj, a, c);
                    }
                    if self.rg(b) {
                        let c = self.mul(g, a);
                        self.accumulate(&mut adj, b, c);
                    }
                }
                Op::AddRow(a, row) => {
                    self.accumulate(&mut adj, a, g);
                    if self.rg(row) {
                        let c = self.sum_rows(g);
                        self.accumulate(&mut adj, row, c);
                    }
                }
                Op::SumRows(a) => {
                    let n = self.value(a).rows();
                    let c = self.broadcast_rows(g, n);
                    self.accumulate(&mut adj, a, c);
                }
                Op::BroadcastRows(row) => {
                    let c = self.sum_rows(g);
                    self.accumulate(&mut adj, row, c);
                }
                Op::SumCols(a) => {
                    let m = self.value(a).cols();
                    let c = self.broadcast_cols(g, m);
                    self.accumulate(&mut adj, a, c);
                }
                Op::BroadcastCols(col) => {
                    let c = self.sum_cols(g);
                    self.accumulate(&mut adj, col, c);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(a).shape();
                    let c = self.broadcast_scalar(g, r, c);
                    self.accumulate(&mut adj, a, c);
                }
                Op::BroadcastScalar(s) => {
                    let c = self.sum(g);
                    self.accumulate(&mut adj, s, c);
                }
                Op::Affine(a, scale) => {
                    let c = self.scale(g, scale);
                    self.accumulate(&mut adj, a, c);
                }
                Op::Tanh(a) => {
                    let sq = self.square(y);
                    let d = self.affine(sq, -1.0, 1.0);
                    let c = self.mul(g, d);
                    self.accumulate(&mut adj, a, c);
                }
                Op::Softplus(a) => {
                    let d = self.sigmoid(a);
                    let c = self.mul(g, d);
                    self.accumulate(&mut adj, a, c);
                }
                Op::Sigmoid(a) => {
                    let one_minus = self.affine(y, -1.0, 1.0);
                    let d = self.mul(y, one_minus);
                    let c = self.mul(g, d);
                    self.accumulate(&mut adj, a, c);
                }
                Op::Exp(a) => {
                    let c = self.mul(g, y);
                    self.accumulate(&mut adj, a, c);
                }
                Op::Log(a) => {
                    let r = self.recip(a);
                    let c = self.mul(g, r);
                    self.accumulate(&mut adj, a, c);
                }
                Op::Recip(a) => {
                    let sq = self.square(y);
                    let d = self.neg(sq);
                    let c = self.mul(g, d);
                    self.accumulate(&mut adj, a, c);
                }
                Op::Square(a) => {
                    let d = self.scale(a, 2.0);
                    let c = self.mul(g, d);
                    self.accumulate(&mut adj, a, c);
                }
                Op::Sqrt(a) => {
                    let r = self.recip(y);
                    let d = self.scale(r, 0.5);
                    let c = self.mul(g, d);
                    self.accumulate(&mut adj, a, c);
                }
                Op::Minimum(a, b) => {
                    let mask_a = self
                        .value(a)
                        .zip_map(self.value(b), |x, z| if x <= z { 1.0 } else { 0.0 });
                    let mask_b = mask_a.map(|m| 1.0 - m);
                    if self.rg(a) {
                        let m = self.constant(mask_a);
                        let c = self.mul(g, m);
                        self.accumulate(&mut adj, a, c);
                    }
                    if self.rg(b) {
                        let m = self.constant(mask_b);
                        let c = self.mul(g, m);
                        self.accumulate(&mut adj, b, c);
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    let mask = self
                        .value(a)
                        .map(|x| if x >= lo && x <= hi { 1.0 } else { 0.0 });
                    let m = self.constant(mask);
                    let c = self.mul(g, m);
                    self.accumulate(&mut adj, a, c);
                }
                Op::SliceCols(a, start) => {
                    let total = self.value(a).cols();
                    let c = self.pad_cols(g, start, total);
                    self.accumulate(&mut adj, a, c);
                }
                Op::PadCols(a, start) => {
                    let w = self.value(a).cols();
                    let c = self.slice_cols(g, start, start + w);
                    self.accumulate(&mut adj, a, c);
                }
                Op::ConcatCols(a, b) => {
                    let wa = self.value(a).cols();
                    let wb = self.value(b).cols();
                    if self.rg(a) {
                        let c = self.slice_cols(g, 0, wa);
                        self.accumulate(&mut adj, a, c);
                    }
                    if self.rg(b) {
                        let c = self.slice_cols(g, wa, wa + wb);
                        self.accumulate(&mut adj, b, c);
                    }
                }
                Op::Transpose(a) => {
                    let c = self.transpose(g);
                    self.accumulate(&mut adj, a, c);
                }
            }
        }
        Ok(Gradients {
            adjoints: adj,
            visited,
        })
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], target: Var, contribution: Var) {
        if !self.rg(target) {
            return;
        }
        adj[target.0] = Some(match adj[target.0] {
            None => contribution,
            Some(prev) => self.add(prev, contribution),
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_derivative_two_x() {
        let mut t = Tape::new();
        let x = t.variable(Matrix::scalar(3.0));
        let y = t.mul(x, x);
        let g = t.gradients(y, None).unwrap();
        assert_eq!(t.value(g.get(x).unwrap()).item(), 6.0);
    }

    #[test]
    fn zero_adjoint_gives_zero_gradient() {
        let mut t = Tape::new();
        let x = t.variable(Matrix::row_vector(&[0.3, -1.2]));
        let w = t.variable(Matrix::from_vec(2, 1, vec![0.7, 2.0]));
        let h = t.matmul(x, w);
        let y = t.tanh(h);
        let g = t.gradients(y, Some(Matrix::zeros(1, 1))).unwrap();
        assert!(t.value(g.get(w).unwrap()).as_slice().iter().all(|v| *v == 0.0));
        assert!(t.value(g.get(x).unwrap()).as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn second_derivative_of_cube() {
        // d/dx (d/dx x^3) = 6x
        let mut t = Tape::new();
        let x = t.variable(Matrix::scalar(1.5));
        let x2 = t.square(x);
        let x3 = t.mul(x2, x);
        let g = t.gradients(x3, None).unwrap();
        let dx = g.get(x).unwrap();
        assert!((t.value(dx).item() - 3.0 * 1.5 * 1.5).abs() < 1e-12);
        let g2 = t.gradients(dx, None).unwrap();
        assert!((t.value(g2.get(x).unwrap()).item() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn each_node_visited_once() {
        let mut t = Tape::new();
        let x = t.variable(Matrix::scalar(0.4));
        let a = t.tanh(x);
        let b = t.exp(x);
        let c = t.add(a, b);
        let n = t.len();
        let g = t.gradients(c, None).unwrap();
        assert_eq!(g.visited(), n);
    }

    #[test]
    fn seed_shape_is_checked() {
        let mut t = Tape::new();
        let x = t.variable(Matrix::zeros(2, 2));
        assert!(matches!(
            t.gradients(x, Some(Matrix::zeros(1, 2))),
            Err(Error::Usage(_))
        ));
    }
}
