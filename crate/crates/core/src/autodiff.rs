//! Reverse-mode automatic differentiation on a tape of 2D tensors.
//!
//! Every operation appends a node holding its value; [`Tape::backward`] walks
//! the nodes in reverse and accumulates adjoints. Input derivatives of the
//! networks are built as ordinary nodes (forward tangents), so gradients of
//! losses that contain `∂_t f̃` come out of the same backward pass.
//!
//! Binary elementwise operations broadcast: each operand dimension must match
//! the output or be 1.

use serde::{Deserialize, Serialize};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must be rows * cols");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(1, 1, vec![value])
    }

    pub fn row(data: Vec<f64>) -> Self {
        Self::new(1, data.len(), data)
    }

    pub fn col(data: Vec<f64>) -> Self {
        Self::new(data.len(), 1, data)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Recip(Var),
    Clamp(Var, f64, f64),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    RowKron(Var, Var),
    ColKron(Var, Var),
    ExpandAxis(Var, usize, [usize; 3]),
}

#[derive(Debug, Clone)]
struct Node {
    value: Mat,
    op: Op,
    /// Whether any leaf reaches this node; adjoints are skipped otherwise.
    live: bool,
}

/// Recording of a computation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints returned by [`Tape::backward`]; only leaves keep theirs.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of `v` with zeros for unreachable nodes.
    pub fn get_or_zeros(&self, v: Var, like: &Mat) -> Mat {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(like.rows, like.cols))
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        assert!(
            x == y || x == 1 || y == 1,
            "incompatible broadcast shapes {a:?} and {b:?}"
        );
        x.max(y)
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

/// Elementwise binary map with broadcasting.
fn zip_broadcast(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    let (r, c) = broadcast_shape(a.shape(), b.shape());
    if a.shape() == b.shape() {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Mat::new(r, c, data);
    }
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        let ia = if a.rows == 1 { 0 } else { i };
        let ib = if b.rows == 1 { 0 } else { i };
        for j in 0..c {
            let x = a.data[ia * a.cols + if a.cols == 1 { 0 } else { j }];
            let y = b.data[ib * b.cols + if b.cols == 1 { 0 } else { j }];
            data.push(f(x, y));
        }
    }
    Mat::new(r, c, data)
}

/// Sums a full-size adjoint down to the (broadcast) shape of an operand.
fn reduce_to(g: Mat, shape: (usize, usize)) -> Mat {
    if g.shape() == shape {
        return g;
    }
    let mut out = Mat::zeros(shape.0, shape.1);
    for i in 0..g.rows {
        let oi = if shape.0 == 1 { 0 } else { i };
        for j in 0..g.cols {
            let oj = if shape.1 == 1 { 0 } else { j };
            out.data[oi * shape.1 + oj] += g.data[i * g.cols + j];
        }
    }
    out
}

fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    Mat::new(a.rows, a.cols, a.data.iter().map(|&x| f(x)).collect())
}

/// `a · b`.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    gemm(m, k, n, &a.data, (k, 1), &b.data, (n, 1))
}

/// `a · bᵀ`.
pub fn matmul_t(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols, "matmul_t inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.rows);
    gemm(m, k, n, &a.data, (k, 1), &b.data, (1, k))
}

/// `aᵀ · b`.
fn t_matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows, b.rows);
    let (k, m, n) = (a.rows, a.cols, b.cols);
    gemm(m, k, n, &a.data, (1, m), &b.data, (n, 1))
}

/// Row-major `m×n` product of strided operands; strides are (row, col).
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
) -> Mat {
    let mut out = vec![0.0; m * n];
    if m * n > 0 && k > 0 {
        // SAFETY: the strides address exactly the m×k and k×n blocks of `a` and `b`, and `out` is m×n.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                sa.0 as isize,
                sa.1 as isize,
                b.as_ptr(),
                sb.0 as isize,
                sb.1 as isize,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Mat::new(m, n, out)
}

/// (outer, inner) block sizes around `axis` in the row-major tensor grid.
fn expand_blocks(axis: usize, dims: [usize; 3]) -> (usize, usize) {
    (
        dims[..axis].iter().product(),
        dims[axis + 1..].iter().product(),
    )
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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        let live = match &op {
            Op::Leaf => true,
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::RowKron(a, b)
            | Op::ColKron(a, b) => self.live(*a) || self.live(*b),
            Op::ConcatCols(parts) => parts.iter().any(|&p| self.live(p)),
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Recip(a)
            | Op::Clamp(a, _, _)
            | Op::SumAll(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::SliceCols(a, _)
            | Op::ExpandAxis(a, _, _) => self.live(*a),
        };
        self.nodes.push(Node { value, op, live });
        Var(self.nodes.len() - 1)
    }

    fn live(&self, v: Var) -> bool {
        self.nodes[v.0].live
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Input or parameter node.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Node without an adjoint.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            live: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Mat::scalar(value))
    }

    /// Copy of `a` that blocks the backward pass.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_t(self.value(a), self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = map(self.value(a), |x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = map(self.value(a), |x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = map(self.value(a), |x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = map(self.value(a), f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = map(self.value(a), f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = map(self.value(a), f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = map(self.value(a), f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = map(self.value(a), |x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = map(self.value(a), f64::recip);
        self.push(v, Op::Recip(a))
    }

    /// Clamp to `[lo, hi]`; the adjoint is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = map(self.value(a), |x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Mat::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// `[r, c] → [1, c]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = vec![0.0; m.cols];
        for i in 0..m.rows {
            for (o, x) in out.iter_mut().zip(&m.data[i * m.cols..(i + 1) * m.cols]) {
                *o += x;
            }
        }
        self.push(Mat::row(out), Op::SumRows(a))
    }

    /// `[r, c] → [r, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let out = (0..m.rows)
            .map(|i| m.data[i * m.cols..(i + 1) * m.cols].iter().sum())
            .collect();
        self.push(Mat::col(out), Op::SumCols(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.cols, "column slice out of range");
        let mut out = Vec::with_capacity(m.rows * len);
        for i in 0..m.rows {
            out.extend_from_slice(&m.data[i * m.cols + start..i * m.cols + start + len]);
        }
        self.push(Mat::new(m.rows, len, out), Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                let m = self.value(p);
                assert_eq!(m.rows, rows, "concat row mismatch");
                out.extend_from_slice(&m.data[i * m.cols..(i + 1) * m.cols]);
            }
        }
        self.push(Mat::new(rows, cols, out), Op::ConcatCols(parts.to_vec()))
    }

    /// Row-wise Kronecker product `[P, n₁] ⊗ [P, n₂] → [P, n₁n₂]`.
    pub fn row_kron(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.rows, y.rows, "row_kron row mismatch");
        let (p, n1, n2) = (x.rows, x.cols, y.cols);
        let mut out = Vec::with_capacity(p * n1 * n2);
        for r in 0..p {
            let yr = &y.data[r * n2..(r + 1) * n2];
            for i in 0..n1 {
                let xi = x.data[r * n1 + i];
                out.extend(yr.iter().map(|&v| xi * v));
            }
        }
        self.push(Mat::new(p, n1 * n2, out), Op::RowKron(a, b))
    }

    /// Column-wise Khatri–Rao product `[m₁, r] ⊙ [m₂, r] → [m₁m₂, r]`.
    pub fn col_kron(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols, y.cols, "col_kron column mismatch");
        let (m1, m2, r) = (x.rows, y.rows, x.cols);
        let mut out = Vec::with_capacity(m1 * m2 * r);
        for i in 0..m1 {
            let xi = &x.data[i * r..(i + 1) * r];
            for j in 0..m2 {
                let yj = &y.data[j * r..(j + 1) * r];
                out.extend(xi.iter().zip(yj).map(|(a, b)| a * b));
            }
        }
        self.push(Mat::new(m1 * m2, r, out), Op::ColKron(a, b))
    }

    /// Broadcasts a per-axis factor `[R, dims[axis]]` to the flattened tensor
    /// grid `[R, n₁n₂n₃]`.
    pub fn expand_axis(&mut self, a: Var, axis: usize, dims: [usize; 3]) -> Var {
        let m = self.value(a);
        assert!(
            axis < 3 && m.cols == dims[axis],
            "expand_axis shape mismatch"
        );
        let q = dims[0] * dims[1] * dims[2];
        let (outer, inner) = expand_blocks(axis, dims);
        let mut out = Vec::with_capacity(m.rows * q);
        for r in 0..m.rows {
            let row = &m.data[r * m.cols..(r + 1) * m.cols];
            for _ in 0..outer {
                for &x in row {
                    out.extend(std::iter::repeat(x).take(inner));
                }
            }
        }
        self.push(Mat::new(m.rows, q, out), Op::ExpandAxis(a, axis, dims))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Mat::scalar(1.0));
        macro_rules! acc {
            ($v:expr, $g:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].live {
                    let gm: Mat = $g;
                    match &mut grads[v.0] {
                        Some(x) => x.add_assign(&gm),
                        slot => *slot = Some(gm),
                    }
                }
            }};
        }
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let val = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    acc!(*a, matmul_t(&g, y));
                    acc!(*b, t_matmul(x, &g));
                }
                Op::MatMulT(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    acc!(*a, matmul(&g, y));
                    acc!(*b, t_matmul(&g, x));
                }
                Op::Add(a, b) => {
                    let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                    acc!(*a, reduce_to(g.clone(), sa));
                    acc!(*b, reduce_to(g, sb));
                }
                Op::Sub(a, b) => {
                    let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                    acc!(*a, reduce_to(g.clone(), sa));
                    acc!(*b, reduce_to(map(&g, |x| -x), sb));
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    acc!(*a, reduce_to(zip_broadcast(&g, y, |p, q| p * q), x.shape()));
                    acc!(*b, reduce_to(zip_broadcast(&g, x, |p, q| p * q), y.shape()));
                }
                Op::Div(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    acc!(*a, reduce_to(zip_broadcast(&g, y, |p, q| p / q), x.shape()));
                    // d(a/b)/db = -(a/b)/b
                    let gc = zip_broadcast(&g, val, |p, c| -p * c);
                    acc!(
                        *b,
                        reduce_to(zip_broadcast(&gc, y, |p, q| p / q), y.shape())
                    );
                }
                Op::Neg(a) => {
                    acc!(*a, map(&g, |x| -x));
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc!(*a, map(&g, |x| c * x));
                }
                Op::AddScalar(a) => {
                    acc!(*a, g);
                }
                Op::Tanh(a) => {
                    acc!(*a, zip_broadcast(&g, val, |p, y| p * (1.0 - y * y)));
                }
                Op::Exp(a) => {
                    acc!(*a, zip_broadcast(&g, val, |p, y| p * y));
                }
                Op::Ln(a) => {
                    acc!(*a, zip_broadcast(&g, self.value(*a), |p, x| p / x));
                }
                Op::Sqrt(a) => {
                    acc!(*a, zip_broadcast(&g, val, |p, y| 0.5 * p / y));
                }
                Op::Square(a) => {
                    acc!(*a, zip_broadcast(&g, self.value(*a), |p, x| 2.0 * p * x));
                }
                Op::Recip(a) => {
                    acc!(*a, zip_broadcast(&g, val, |p, y| -p * y * y));
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let ga = zip_broadcast(&g, self.value(*a), |p, x| {
                        if (lo..=hi).contains(&x) {
                            p
                        } else {
                            0.0
                        }
                    });
                    acc!(*a, ga);
                }
                Op::SumAll(a) => {
                    let s = self.value(*a).shape();
                    acc!(*a, Mat::filled(s.0, s.1, g.data[0]));
                }
                Op::SumRows(a) => {
                    let r = self.value(*a).rows;
                    let ga = zip_broadcast(&Mat::zeros(r, g.cols), &g, |_, p| p);
                    acc!(*a, ga);
                }
                Op::SumCols(a) => {
                    let c = self.value(*a).cols;
                    let ga = zip_broadcast(&Mat::zeros(g.rows, c), &g, |_, p| p);
                    acc!(*a, ga);
                }
                Op::SliceCols(a, start) => {
                    let s = self.value(*a).shape();
                    let mut ga = Mat::zeros(s.0, s.1);
                    for i in 0..g.rows {
                        for j in 0..g.cols {
                            ga.data[i * s.1 + start + j] = g.data[i * g.cols + j];
                        }
                    }
                    acc!(*a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let c = self.value(p).cols;
                        let mut gp = Vec::with_capacity(g.rows * c);
                        for i in 0..g.rows {
                            gp.extend_from_slice(&g.data[i * g.cols + off..i * g.cols + off + c]);
                        }
                        acc!(p, Mat::new(g.rows, c, gp));
                        off += c;
                    }
                }
                Op::RowKron(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let (p, n1, n2) = (x.rows, x.cols, y.cols);
                    let mut ga = Mat::zeros(p, n1);
                    let mut gb = Mat::zeros(p, n2);
                    for r in 0..p {
                        for i in 0..n1 {
                            let gi = &g.data[r * n1 * n2 + i * n2..r * n1 * n2 + (i + 1) * n2];
                            let yr = &y.data[r * n2..(r + 1) * n2];
                            ga.data[r * n1 + i] = gi.iter().zip(yr).map(|(a, b)| a * b).sum();
                            let xi = x.data[r * n1 + i];
                            for (o, &gv) in gb.data[r * n2..(r + 1) * n2].iter_mut().zip(gi) {
                                *o += gv * xi;
                            }
                        }
                    }
                    acc!(*a, ga);
                    acc!(*b, gb);
                }
                Op::ColKron(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let (m1, m2, r) = (x.rows, y.rows, x.cols);
                    let mut ga = Mat::zeros(m1, r);
                    let mut gb = Mat::zeros(m2, r);
                    for i in 0..m1 {
                        for j in 0..m2 {
                            let row = (i * m2 + j) * r;
                            for k in 0..r {
                                let gv = g.data[row + k];
                                ga.data[i * r + k] += gv * y.data[j * r + k];
                                gb.data[j * r + k] += gv * x.data[i * r + k];
                            }
                        }
                    }
                    acc!(*a, ga);
                    acc!(*b, gb);
                }
                Op::ExpandAxis(a, axis, dims) => {
                    let s = self.value(*a).shape();
                    let (outer, inner) = expand_blocks(*axis, *dims);
                    let mut ga = Mat::zeros(s.0, s.1);
                    for r in 0..g.rows {
                        let dst = &mut ga.data[r * s.1..(r + 1) * s.1];
                        let src = g.data[r * g.cols..(r + 1) * g.cols].chunks_exact(inner);
                        for (k, c) in src.enumerate() {
                            dst[k % s.1] += c.iter().sum::<f64>();
                        }
                        debug_assert_eq!(g.cols, outer * s.1 * inner);
                    }
                    acc!(*a, ga);
                }
            }
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Mat {
        Mat::new(r, c, (0..r * c).map(|_| rng.gen_range(lo..hi)).collect())
    }

    /// Checks the adjoint of every input against central differences of
    /// `Σ y ⊙ W` for a fixed random `W`.
    fn check(inputs: Vec<Mat>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let eval = |xs: &[Mat], probe: Option<&Mat>| -> (f64, Mat) {
            let mut t = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|m| t.leaf(m.clone())).collect();
            let y = build(&mut t, &vars);
            let shape = t.value(y).shape();
            let wmat = probe
                .cloned()
                .unwrap_or_else(|| Mat::zeros(shape.0, shape.1));
            let w = t.constant(wmat.clone());
            let prod = t.mul(y, w);
            let s = t.sum_all(prod);
            (t.value(s).data[0], wmat)
        };
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| t.leaf(m.clone())).collect();
        let y = build(&mut t, &vars);
        let (r, c) = t.value(y).shape();
        let probe = random(&mut rng, r, c, -1.0, 1.0);
        let w = t.constant(probe.clone());
        let prod = t.mul(y, w);
        let s = t.sum_all(prod);
        let grads = t.backward(s);
        let h = 1e-6;
        for (k, x) in inputs.iter().enumerate() {
            let g = grads.get_or_zeros(vars[k], x);
            for e in 0..x.len() {
                let mut plus = inputs.clone();
                plus[k].data[e] += h;
                let mut minus = inputs.clone();
                minus[k].data[e] -= h;
                let fd = (eval(&plus, Some(&probe)).0 - eval(&minus, Some(&probe)).0) / (2.0 * h);
                let an = g.data[e];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {k} element {e}: fd {fd} vs adjoint {an}"
                );
            }
        }
    }

    #[test]
    fn matmul_values() {
        let a = Mat::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Mat::new(2, 1, vec![5.0, 6.0]);
        assert_eq!(matmul(&a, &b).data, vec![17.0, 39.0]);
        assert_eq!(matmul_t(&a, &a).data, vec![5.0, 11.0, 11.0, 25.0]);
    }

    #[test]
    fn kron_layouts() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::new(1, 2, vec![1.0, 2.0]));
        let b = t.leaf(Mat::new(1, 3, vec![1.0, 10.0, 100.0]));
        let k = t.row_kron(a, b);
        assert_eq!(t.value(k).data, vec![1.0, 10.0, 100.0, 2.0, 20.0, 200.0]);
        let c = t.leaf(Mat::new(2, 1, vec![1.0, 2.0]));
        let d = t.leaf(Mat::new(2, 1, vec![3.0, 5.0]));
        let kr = t.col_kron(c, d);
        assert_eq!(t.value(kr).data, vec![3.0, 5.0, 6.0, 10.0]);
        let e = t.leaf(Mat::new(1, 2, vec![7.0, 8.0]));
        let x = t.expand_axis(e, 1, [2, 2, 2]);
        assert_eq!(
            t.value(x).data,
            vec![7.0, 7.0, 8.0, 8.0, 7.0, 7.0, 8.0, 8.0]
        );
    }

    #[test]
    fn grad_matmul_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 3, 4, -1.0, 1.0);
        let b = random(&mut rng, 4, 2, -1.0, 1.0);
        let c = random(&mut rng, 5, 4, -1.0, 1.0);
        check(vec![a.clone(), b], |t, v| t.matmul(v[0], v[1]));
        check(vec![a, c], |t, v| t.matmul_t(v[0], v[1]));
    }

    #[test]
    fn grad_broadcast_binary() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let full = random(&mut rng, 3, 4, 0.5, 2.0);
        let row = random(&mut rng, 1, 4, 0.5, 2.0);
        let col = random(&mut rng, 3, 1, 0.5, 2.0);
        let sc = random(&mut rng, 1, 1, 0.5, 2.0);
        for other in [full.clone(), row, col, sc] {
            check(vec![full.clone(), other.clone()], |t, v| t.add(v[0], v[1]));
            check(vec![other.clone(), full.clone()], |t, v| t.sub(v[0], v[1]));
            check(vec![full.clone(), other.clone()], |t, v| t.mul(v[0], v[1]));
            check(vec![other.clone(), full.clone()], |t, v| t.div(v[0], v[1]));
        }
        // Row operand against column operand.
        let r = random(&mut rng, 1, 3, 0.5, 2.0);
        let c = random(&mut rng, 2, 1, 0.5, 2.0);
        check(vec![r, c], |t, v| t.mul(v[0], v[1]));
    }

    #[test]
    fn grad_unary() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 3, 3, 0.2, 1.5);
        check(vec![x.clone()], |t, v| t.tanh(v[0]));
        check(vec![x.clone()], |t, v| t.exp(v[0]));
        check(vec![x.clone()], |t, v| t.ln(v[0]));
        check(vec![x.clone()], |t, v| t.sqrt(v[0]));
        check(vec![x.clone()], |t, v| t.square(v[0]));
        check(vec![x.clone()], |t, v| t.recip(v[0]));
        check(vec![x.clone()], |t, v| t.neg(v[0]));
        check(vec![x.clone()], |t, v| t.scale(v[0], -2.5));
        check(vec![x.clone()], |t, v| t.add_scalar(v[0], 4.0));
        check(vec![x], |t, v| t.clamp(v[0], 0.0, 1.0));
    }

    #[test]
    fn grad_reductions_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 3, 4, -1.0, 1.0);
        let y = random(&mut rng, 3, 2, -1.0, 1.0);
        check(vec![x.clone()], |t, v| t.sum_all(v[0]));
        check(vec![x.clone()], |t, v| t.mean_all(v[0]));
        check(vec![x.clone()], |t, v| t.sum_rows(v[0]));
        check(vec![x.clone()], |t, v| t.sum_cols(v[0]));
        check(vec![x.clone()], |t, v| t.slice_cols(v[0], 1, 2));
        check(vec![x.clone(), y.clone()], |t, v| {
            t.concat_cols(&[v[0], v[1], v[0]])
        });
        check(vec![x.clone(), y.clone()], |t, v| t.row_kron(v[0], v[1]));
        let z = random(&mut rng, 5, 4, -1.0, 1.0);
        check(vec![x.clone(), z], |t, v| t.col_kron(v[0], v[1]));
        let w = random(&mut rng, 2, 3, -1.0, 1.0);
        for axis in 0..3 {
            check(vec![w.clone()], move |t, v| {
                t.expand_axis(v[0], axis, [3, 3, 3])
            });
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::scalar(3.0));
        let d = t.detach(x);
        let y = t.mul(x, d);
        let g = t.backward(y);
        assert_eq!(g.get(x).unwrap().data[0], 3.0);
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::scalar(3.0));
        let unused = t.leaf(Mat::scalar(1.0));
        let y = t.square(x);
        let g = t.backward(y);
        assert!(g.get(unused).is_none());
        assert_eq!(g.get(x).unwrap().data[0], 6.0);
    }

    #[test]
    fn gradient_is_linear_in_output_scale() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::row(vec![0.3, -0.7]));
        let y = t.tanh(x);
        let s = t.sum_all(y);
        let s3 = t.scale(s, 3.0);
        let g1 = t.backward(s).get(x).unwrap().clone();
        let g3 = t.backward(s3).get(x).unwrap().clone();
        for (a, b) in g1.data.iter().zip(&g3.data) {
            assert!((3.0 * a - b).abs() < 1e-15);
        }
    }
}
