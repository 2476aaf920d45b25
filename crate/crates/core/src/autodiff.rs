//! Matrix-valued reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of a forward pass as a node holding
//! its value (a dense `f64` matrix) and the operation that produced it.
//! [`Graph::backward`] then walks the tape in reverse and accumulates
//! adjoints. Node handles ([`Var`]) are plain indices, so building
//! expressions never fights the borrow checker.
//!
//! Elementwise binary operations broadcast: each operand may be a full
//! matrix, a `1×1` scalar, a `1×c` row or an `r×1` column.
//!
//! Besides the usual elementwise and matrix operations the tape carries the
//! linear-algebra primitives a sparse-GP objective needs: Cholesky
//! factorisation with its backward recurrence, triangular solves, and
//! pairwise kernel distances.

use nalgebra::DMatrix;
use std::f64::consts::PI;

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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Sqrt(Var),
    Square(Var),
    Recip(Var),
    Sum(Var),
    ColSum(Var),
    Slice {
        src: Var,
        row: usize,
        col: usize,
    },
    HCat(Vec<Var>),
    VCat(Vec<Var>),
    Reshape(Var),
    Diag(Var),
    AddDiag(Var),
    LowerSoftplusDiag(Var),
    PackedLower(Var),
    Cholesky(Var),
    SolveLower(Var, Var),
    SolveLowerT(Var, Var),
    SqDist(Var, Var),
    ArcCos0(Var, Var),
}

struct Node {
    value: DMatrix<f64>,
    op: Op,
}

/// Tape of recorded matrix operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Errors raised by graph operations that can fail on valid shapes.
#[derive(Debug, Clone, PartialEq)]
pub enum GraphError {
    NotPositiveDefinite,
    SingularTriangular,
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn inv_softplus(y: f64) -> f64 {
    assert!(y > 0.0, "inverse softplus of non-positive value {y}");
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
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

/// Number of entries in a packed `n×n` lower triangle.
pub fn packed_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Side length `n` of a lower triangle with `len` packed entries.
pub fn packed_side(len: usize) -> Option<usize> {
    let n = (((8 * len + 1) as f64).sqrt() as usize).saturating_sub(1) / 2;
    (packed_len(n) == len).then_some(n)
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("cannot broadcast shapes {a:?} and {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

#[inline]
fn bget(m: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    let r = if m.nrows() == 1 { 0 } else { i };
    let c = if m.ncols() == 1 { 0 } else { j };
    m[(r, c)]
}

/// Sum a gradient of broadcast shape back down to `shape`.
fn reduce_to(grad: DMatrix<f64>, shape: (usize, usize)) -> DMatrix<f64> {
    if grad.shape() == shape {
        return grad;
    }
    let mut out = DMatrix::zeros(shape.0, shape.1);
    for j in 0..grad.ncols() {
        for i in 0..grad.nrows() {
            let r = if shape.0 == 1 { 0 } else { i };
            let c = if shape.1 == 1 { 0 } else { j };
            out[(r, c)] += grad[(i, j)];
        }
    }
    out
}

fn zip_broadcast(a: &DMatrix<f64>, b: &DMatrix<f64>, f: impl Fn(f64, f64) -> f64) -> DMatrix<f64> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let (r, c) = broadcast_shape(a.shape(), b.shape());
    DMatrix::from_fn(r, c, |i, j| f(bget(a, i, j), bget(b, i, j)))
}

fn lower_softplus_diag(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    DMatrix::from_fn(n, n, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => m[(i, j)],
        std::cmp::Ordering::Equal => softplus(m[(i, i)]),
        std::cmp::Ordering::Less => 0.0,
    })
}

/// Iterate the packed (row-major lower triangle) positions of an `n×n` matrix.
fn packed_positions(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(|i| (0..=i).map(move |j| (i, j)))
}

/// Angle between two vectors, via the half-angle form so that identical and
/// nearly parallel inputs are resolved accurately. Zero if either vanishes.
pub(crate) fn angle_between(x: &[f64], z: &[f64]) -> f64 {
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nz = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || nz == 0.0 {
        return 0.0;
    }
    let (mut diff, mut sum) = (0.0, 0.0);
    for (a, b) in x.iter().zip(z) {
        let (ua, ub) = (a / nx, b / nz);
        diff += (ua - ub) * (ua - ub);
        sum += (ua + ub) * (ua + ub);
    }
    2.0 * diff.sqrt().atan2(sum.sqrt())
}

fn arccos0_entry(x: &[f64], z: &[f64]) -> f64 {
    1.0 - angle_between(x, z) / PI
}

fn row_vec(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    (0..m.ncols()).map(|k| m[(i, k)]).collect()
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            nodes: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DMatrix<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: DMatrix<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A constant input; identical to a leaf, its adjoint is simply ignored.
    pub fn constant(&mut self, value: DMatrix<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(DMatrix::from_element(1, 1, v))
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m[(0, 0)]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
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
        let v = -self.value(a);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s))
    }

    pub fn offset(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).add_scalar(s);
        self.push(v, Op::Offset(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    /// Square root with the derivative at zero defined as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0).sqrt());
        self.push(v, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(v, Op::Recip(a))
    }

    /// Sum of all entries, as a `1×1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = DMatrix::from_element(1, 1, self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Column sums, as a `1×c` row.
    pub fn col_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).row_sum();
        let v = DMatrix::from_row_slice(1, v.len(), v.as_slice());
        self.push(v, Op::ColSum(a))
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let s = self.square(a);
        self.sum(s)
    }

    pub fn slice(&mut self, a: Var, row: usize, col: usize, nrows: usize, ncols: usize) -> Var {
        let v = self.value(a).view((row, col), (nrows, ncols)).into_owned();
        self.push(v, Op::Slice { src: a, row, col })
    }

    pub fn rows(&mut self, a: Var, start: usize, n: usize) -> Var {
        let c = self.shape(a).1;
        self.slice(a, start, 0, n, c)
    }

    pub fn cols(&mut self, a: Var, start: usize, n: usize) -> Var {
        let r = self.shape(a).0;
        self.slice(a, 0, start, r, n)
    }

    pub fn hcat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.shape(parts[0]).0;
        let c: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut v = DMatrix::zeros(r, c);
        let mut off = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.nrows(), r, "hcat row mismatch");
            v.view_mut((0, off), m.shape()).copy_from(m);
            off += m.ncols();
        }
        self.push(v, Op::HCat(parts.to_vec()))
    }

    pub fn vcat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.shape(parts[0]).1;
        let r: usize = parts.iter().map(|p| self.shape(*p).0).sum();
        let mut v = DMatrix::zeros(r, c);
        let mut off = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.ncols(), c, "vcat column mismatch");
            v.view_mut((off, 0), m.shape()).copy_from(m);
            off += m.nrows();
        }
        self.push(v, Op::VCat(parts.to_vec()))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, nrows: usize, ncols: usize) -> Var {
        let m = self.value(a);
        assert_eq!(m.len(), nrows * ncols, "reshape size mismatch");
        let src_cols = m.ncols();
        let v = DMatrix::from_fn(nrows, ncols, |i, j| {
            let k = i * ncols + j;
            m[(k / src_cols, k % src_cols)]
        });
        self.push(v, Op::Reshape(a))
    }

    /// Diagonal of a square matrix as an `n×1` column.
    pub fn diag(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = DMatrix::from_fn(m.nrows(), 1, |i, _| m[(i, i)]);
        self.push(v, Op::Diag(a))
    }

    /// `a + c·I`; `c` is a constant.
    pub fn add_diag(&mut self, a: Var, c: f64) -> Var {
        let mut v = self.value(a).clone();
        for i in 0..v.nrows().min(v.ncols()) {
            v[(i, i)] += c;
        }
        self.push(v, Op::AddDiag(a))
    }

    /// Lower triangle of a square matrix with softplus applied to the diagonal.
    pub fn lower_softplus_diag(&mut self, a: Var) -> Var {
        let v = lower_softplus_diag(self.value(a));
        self.push(v, Op::LowerSoftplusDiag(a))
    }

    /// Unpack a `1×n(n+1)/2` row (row-major lower triangle) into an `n×n`
    /// lower-triangular matrix whose diagonal passes through softplus.
    pub fn packed_lower(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let n = packed_side(m.len()).expect("packed length is not triangular");
        let mut v = DMatrix::zeros(n, n);
        for (k, (i, j)) in packed_positions(n).enumerate() {
            let raw = m[k];
            v[(i, j)] = if i == j { softplus(raw) } else { raw };
        }
        self.push(v, Op::PackedLower(a))
    }

    pub fn cholesky(&mut self, a: Var) -> Result<Var, GraphError> {
        let m = self.value(a).clone();
        let l = nalgebra::Cholesky::new(m)
            .ok_or(GraphError::NotPositiveDefinite)?
            .unpack();
        Ok(self.push(l, Op::Cholesky(a)))
    }

    /// `L⁻¹ B` for lower-triangular `L`.
    pub fn solve_lower(&mut self, l: Var, b: Var) -> Result<Var, GraphError> {
        let x = self
            .value(l)
            .solve_lower_triangular(self.value(b))
            .ok_or(GraphError::SingularTriangular)?;
        Ok(self.push(x, Op::SolveLower(l, b)))
    }

    /// `L⁻ᵀ B` for lower-triangular `L`.
    pub fn solve_lower_t(&mut self, l: Var, b: Var) -> Result<Var, GraphError> {
        let x = self
            .value(l)
            .tr_solve_lower_triangular(self.value(b))
            .ok_or(GraphError::SingularTriangular)?;
        Ok(self.push(x, Op::SolveLowerT(l, b)))
    }

    /// Pairwise squared Euclidean distances between the rows of `x` and `z`.
    pub fn sq_dist(&mut self, x: Var, z: Var) -> Var {
        let (xm, zm) = (self.value(x), self.value(z));
        assert_eq!(xm.ncols(), zm.ncols(), "sq_dist input dims differ");
        let v = DMatrix::from_fn(xm.nrows(), zm.nrows(), |i, j| {
            (0..xm.ncols())
                .map(|k| {
                    let d = xm[(i, k)] - zm[(j, k)];
                    d * d
                })
                .sum()
        });
        self.push(v, Op::SqDist(x, z))
    }

    /// Pairwise `1 − θ/π` where `θ` is the angle between rows of `x` and `z`
    /// (zero-norm rows give `θ = 0`).
    pub fn arccos0(&mut self, x: Var, z: Var) -> Var {
        let (xm, zm) = (self.value(x), self.value(z));
        assert_eq!(xm.ncols(), zm.ncols(), "arccos0 input dims differ");
        let xr: Vec<_> = (0..xm.nrows()).map(|i| row_vec(xm, i)).collect();
        let zr: Vec<_> = (0..zm.nrows()).map(|i| row_vec(zm, i)).collect();
        let v = DMatrix::from_fn(xr.len(), zr.len(), |i, j| arccos0_entry(&xr[i], &zr[j]));
        self.push(v, Op::ArcCos0(x, z))
    }

    /// Reverse sweep from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(DMatrix::from_element(1, 1, 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &DMatrix<f64>, grads: &mut [Option<DMatrix<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut acc = |v: Var, d: DMatrix<f64>| {
            debug_assert_eq!(d.shape(), self.shape(v), "adjoint shape mismatch");
            match &mut grads[v.0] {
                Some(existing) => *existing += d,
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, reduce_to(g.clone(), self.shape(*a)));
                acc(*b, reduce_to(g.clone(), self.shape(*b)));
            }
            Op::Sub(a, b) => {
                acc(*a, reduce_to(g.clone(), self.shape(*a)));
                acc(*b, reduce_to(-g, self.shape(*b)));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = DMatrix::from_fn(g.nrows(), g.ncols(), |i, j| g[(i, j)] * bget(bv, i, j));
                let gb = DMatrix::from_fn(g.nrows(), g.ncols(), |i, j| g[(i, j)] * bget(av, i, j));
                acc(*a, reduce_to(ga, av.shape()));
                acc(*b, reduce_to(gb, bv.shape()));
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = DMatrix::from_fn(g.nrows(), g.ncols(), |i, j| g[(i, j)] / bget(bv, i, j));
                let gb = DMatrix::from_fn(g.nrows(), g.ncols(), |i, j| {
                    let y = bget(bv, i, j);
                    -g[(i, j)] * bget(av, i, j) / (y * y)
                });
                acc(*a, reduce_to(ga, av.shape()));
                acc(*b, reduce_to(gb, bv.shape()));
            }
            Op::Neg(a) => acc(*a, -g),
            Op::Scale(a, s) => acc(*a, g * *s),
            Op::Offset(a) => acc(*a, g.clone()),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, g * bv.transpose());
                acc(*b, av.transpose() * g);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Exp(a) => acc(*a, g.component_mul(out)),
            Op::Log(a) => acc(*a, g.component_div(self.value(*a))),
            Op::Tanh(a) => acc(*a, g.zip_map(out, |gi, y| gi * (1.0 - y * y))),
            Op::Sigmoid(a) => acc(*a, g.zip_map(out, |gi, y| gi * y * (1.0 - y))),
            Op::Softplus(a) => acc(*a, g.zip_map(self.value(*a), |gi, x| gi * sigmoid(x))),
            Op::Sqrt(a) => acc(
                *a,
                g.zip_map(out, |gi, y| if y > 0.0 { gi * 0.5 / y } else { 0.0 }),
            ),
            Op::Square(a) => acc(*a, g.zip_map(self.value(*a), |gi, x| 2.0 * gi * x)),
            Op::Recip(a) => acc(*a, g.zip_map(out, |gi, y| -gi * y * y)),
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, DMatrix::from_element(r, c, g[(0, 0)]));
            }
            Op::ColSum(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, DMatrix::from_fn(r, c, |_, j| g[(0, j)]));
            }
            Op::Slice { src, row, col } => {
                let (r, c) = self.shape(*src);
                let mut d = DMatrix::zeros(r, c);
                d.view_mut((*row, *col), g.shape()).copy_from(g);
                acc(*src, d);
            }
            Op::HCat(parts) => {
                let mut off = 0;
                for p in parts {
                    let (r, c) = self.shape(*p);
                    acc(*p, g.view((0, off), (r, c)).into_owned());
                    off += c;
                }
            }
            Op::VCat(parts) => {
                let mut off = 0;
                for p in parts {
                    let (r, c) = self.shape(*p);
                    acc(*p, g.view((off, 0), (r, c)).into_owned());
                    off += r;
                }
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                let gc = g.ncols();
                acc(
                    *a,
                    DMatrix::from_fn(r, c, |i, j| {
                        let k = i * c + j;
                        g[(k / gc, k % gc)]
                    }),
                );
            }
            Op::Diag(a) => {
                let (r, c) = self.shape(*a);
                let mut d = DMatrix::zeros(r, c);
                for i in 0..r {
                    d[(i, i)] = g[(i, 0)];
                }
                acc(*a, d);
            }
            Op::AddDiag(a) => acc(*a, g.clone()),
            Op::LowerSoftplusDiag(a) => {
                let x = self.value(*a);
                let n = x.nrows();
                acc(
                    *a,
                    DMatrix::from_fn(n, n, |i, j| match i.cmp(&j) {
                        std::cmp::Ordering::Greater => g[(i, j)],
                        std::cmp::Ordering::Equal => g[(i, i)] * sigmoid(x[(i, i)]),
                        std::cmp::Ordering::Less => 0.0,
                    }),
                );
            }
            Op::PackedLower(a) => {
                let x = self.value(*a);
                let mut d = DMatrix::zeros(x.nrows(), x.ncols());
                for (k, (i, j)) in packed_positions(out.nrows()).enumerate() {
                    d[k] = if i == j {
                        g[(i, j)] * sigmoid(x[k])
                    } else {
                        g[(i, j)]
                    };
                }
                acc(*a, d);
            }
            Op::Cholesky(a) => acc(*a, cholesky_backward(out, g)),
            Op::SolveLower(l, b) => {
                // X = L⁻¹B:  B̄ = L⁻ᵀX̄,  L̄ = −tril(B̄ Xᵀ)
                let lv = self.value(*l);
                let gb = lv
                    .tr_solve_lower_triangular(g)
                    .expect("triangular factor became singular");
                let gl = (&gb * out.transpose()).lower_triangle() * -1.0;
                acc(*l, gl);
                acc(*b, gb);
            }
            Op::SolveLowerT(l, b) => {
                // X = L⁻ᵀB:  B̄ = L⁻¹X̄,  L̄ = −tril(X B̄ᵀ)
                let lv = self.value(*l);
                let gb = lv
                    .solve_lower_triangular(g)
                    .expect("triangular factor became singular");
                let gl = (out * gb.transpose()).lower_triangle() * -1.0;
                acc(*l, gl);
                acc(*b, gb);
            }
            Op::SqDist(x, z) => {
                let (xm, zm) = (self.value(*x), self.value(*z));
                let d = xm.ncols();
                let mut gx = DMatrix::zeros(xm.nrows(), d);
                let mut gz = DMatrix::zeros(zm.nrows(), d);
                for i in 0..xm.nrows() {
                    for j in 0..zm.nrows() {
                        let gij = g[(i, j)];
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = 2.0 * gij * (xm[(i, k)] - zm[(j, k)]);
                            gx[(i, k)] += diff;
                            gz[(j, k)] -= diff;
                        }
                    }
                }
                acc(*x, gx);
                acc(*z, gz);
            }
            Op::ArcCos0(x, z) => {
                let (gx, gz) = arccos0_backward(self.value(*x), self.value(*z), g);
                acc(*x, gx);
                acc(*z, gz);
            }
        }
    }
}

/// Adjoint of `A` given the factor `L = chol(A)` and its adjoint `L̄`.
///
/// `Ā = ½(S + Sᵀ)` with `S = L⁻ᵀ Φ(Lᵀ L̄) L⁻¹`, where `Φ` takes the lower
/// triangle and halves the diagonal. Symmetrising is valid because every
/// perturbation of `A` that the graph can produce is symmetric.
pub(crate) fn cholesky_backward(l: &DMatrix<f64>, l_bar: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = (l.transpose() * l_bar).lower_triangle();
    for i in 0..p.nrows() {
        p[(i, i)] *= 0.5;
    }
    // X = L⁻ᵀ P, then S = X L⁻¹ = (L⁻ᵀ Xᵀ)ᵀ
    let x = l
        .tr_solve_lower_triangular(&p)
        .expect("Cholesky factor became singular");
    let s = l
        .tr_solve_lower_triangular(&x.transpose())
        .expect("Cholesky factor became singular")
        .transpose();
    (&s + s.transpose()) * 0.5
}

fn arccos0_backward(
    xm: &DMatrix<f64>,
    zm: &DMatrix<f64>,
    g: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = xm.ncols();
    let mut gx = DMatrix::zeros(xm.nrows(), d);
    let mut gz = DMatrix::zeros(zm.nrows(), d);
    for i in 0..xm.nrows() {
        let x = row_vec(xm, i);
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nx == 0.0 {
            continue;
        }
        for j in 0..zm.nrows() {
            let z = row_vec(zm, j);
            let nz = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nz == 0.0 || g[(i, j)] == 0.0 {
                continue;
            }
            let dot: f64 = x.iter().zip(&z).map(|(a, b)| a * b).sum();
            let c = dot / (nx * nz);
            let s2 = 1.0 - c * c;
            // θ is not differentiable where the inputs are (anti)parallel
            if s2 <= 1e-12 {
                continue;
            }
            // d(1 − acos(c)/π)/dc = 1 / (π √(1 − c²))
            let dc = g[(i, j)] / (PI * s2.sqrt());
            for k in 0..d {
                gx[(i, k)] += dc * (z[k] / (nx * nz) - c * x[k] / (nx * nx));
                gz[(j, k)] += dc * (x[k] / (nx * nz) - c * z[k] / (nz * nz));
            }
        }
    }
    (gx, gz)
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<DMatrix<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DMatrix<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, or zeros of `shape` when `v` does not reach the root.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> DMatrix<f64> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| DMatrix::zeros(shape.0, shape.1))
    }
}
