//! Covariance functions over state-action inputs.
//!
//! Leaf kernels (RBF, Matérn-1/2, order-0 arc-cosine) carry a signal
//! variance and one or more lengthscales, both stored unconstrained and
//! mapped through softplus. Kernels compose by summation and by warping the
//! inputs through a small tanh network before a leaf kernel.
//!
//! Every kernel has two evaluation paths: plain `f64` evaluation
//! ([`Kernel::eval`], [`Kernel::gram`], [`Kernel::cross`]) and recorded
//! evaluation on an autodiff [`Graph`] used inside the training objective.

use crate::autodiff::{angle_between, inv_softplus, softplus, Graph, GraphError, Var};
use crate::error::{Error, Result};
use crate::params::{join, Parameterized, VarCursor};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use std::f64::consts::PI;

/// Hyperparameters of a leaf kernel, stored unconstrained.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelParams {
    raw_variance: DMatrix<f64>,
    raw_lengthscales: DMatrix<f64>,
}

impl KernelParams {
    /// Shared lengthscale when `ard_dims` is `None`, one per input dim otherwise.
    pub fn new(variance: f64, lengthscale: f64, ard_dims: Option<usize>) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::Input(format!("kernel variance must be > 0, got {variance}")));
        }
        if !(lengthscale > 0.0 && lengthscale.is_finite()) {
            return Err(Error::Input(format!(
                "kernel lengthscale must be > 0, got {lengthscale}"
            )));
        }
        let n = ard_dims.unwrap_or(1);
        Ok(Self {
            raw_variance: DMatrix::from_element(1, 1, inv_softplus(variance)),
            raw_lengthscales: DMatrix::from_element(1, n, inv_softplus(lengthscale)),
        })
    }

    pub fn variance(&self) -> f64 {
        softplus(self.raw_variance[0])
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.raw_lengthscales.iter().map(|&r| softplus(r)).collect()
    }

    pub fn is_ard(&self) -> bool {
        self.raw_lengthscales.len() > 1
    }

    fn lengthscale(&self, i: usize) -> f64 {
        let k = if self.is_ard() { i } else { 0 };
        softplus(self.raw_lengthscales[k])
    }
}

/// Feed-forward tanh network applied to kernel inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpNet {
    // (weights: in×out, bias: 1×out), applied to row vectors
    layers: Vec<(DMatrix<f64>, DMatrix<f64>)>,
}

impl WarpNet {
    /// Glorot-uniform weights, zero biases.
    pub fn new(input_dim: usize, widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) || input_dim == 0 {
            return Err(Error::Input(format!(
                "warp widths must be non-empty and positive, got {widths:?}"
            )));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input_dim;
        for &w in widths {
            let bound = (6.0 / (fan_in + w) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
            let weights = DMatrix::from_fn(fan_in, w, |_, _| dist.sample(rng));
            layers.push((weights, DMatrix::zeros(1, w)));
            fan_in = w;
        }
        Ok(Self { layers })
    }

    /// Build from explicit `(weights in×out, bias)` layers.
    pub fn from_layers(layers: Vec<(DMatrix<f64>, DVector<f64>)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Input("warp network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].0.ncols() != pair[1].0.nrows() {
                return Err(Error::Dimension("consecutive warp layers do not chain".into()));
            }
        }
        let mut out = Vec::with_capacity(layers.len());
        for (w, b) in layers {
            if b.len() != w.ncols() {
                return Err(Error::Dimension("warp bias width differs from weights".into()));
            }
            let b = DMatrix::from_row_slice(1, b.len(), b.as_slice());
            out.push((w, b));
        }
        Ok(Self { layers: out })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").0.ncols()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|(w, _)| w.ncols()).collect()
    }

    pub fn warp(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "warp input has {} entries, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut h = DMatrix::from_row_slice(1, x.len(), x);
        for (w, b) in &self.layers {
            h = (h * w + b).map(f64::tanh);
        }
        Ok(h.iter().copied().collect())
    }

    fn warp_rows(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut h = x.clone();
        for (w, b) in &self.layers {
            h *= w;
            for mut row in h.row_iter_mut() {
                row += b;
            }
            h.apply(|v| *v = v.tanh());
        }
        h
    }

    fn graph(&self, g: &mut Graph, vars: &[Var], x: Var) -> Var {
        let mut h = x;
        for pair in vars.chunks(2) {
            let (w, b) = (pair[0], pair[1]);
            let lin = g.matmul(h, w);
            let lin = g.add(lin, b);
            h = g.tanh(lin);
        }
        h
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &DMatrix<f64>)) {
        for (i, (w, b)) in self.layers.iter().enumerate() {
            f(&join(prefix, &format!("{i}.weight")), w);
            f(&join(prefix, &format!("{i}.bias")), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut DMatrix<f64>)) {
        for (i, (w, b)) in self.layers.iter_mut().enumerate() {
            f(&join(prefix, &format!("{i}.weight")), w);
            f(&join(prefix, &format!("{i}.bias")), b);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    Rbf,
    Matern12,
    ArcCosine0,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Kernel {
    Leaf {
        kind: LeafKind,
        input_dim: usize,
        params: KernelParams,
    },
    Sum(Vec<Kernel>),
    Warped {
        net: WarpNet,
        base: Box<Kernel>,
    },
}

impl Kernel {
    pub fn leaf(kind: LeafKind, input_dim: usize, params: KernelParams) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Input("kernel input dimension must be ≥ 1".into()));
        }
        if params.is_ard() && params.raw_lengthscales.len() != input_dim {
            return Err(Error::Dimension(format!(
                "{} ARD lengthscales for input dimension {input_dim}",
                params.raw_lengthscales.len()
            )));
        }
        Ok(Kernel::Leaf {
            kind,
            input_dim,
            params,
        })
    }

    pub fn rbf(input_dim: usize, variance: f64, lengthscale: f64) -> Result<Self> {
        Self::leaf(LeafKind::Rbf, input_dim, KernelParams::new(variance, lengthscale, None)?)
    }

    pub fn matern12(input_dim: usize, variance: f64, lengthscale: f64) -> Result<Self> {
        Self::leaf(
            LeafKind::Matern12,
            input_dim,
            KernelParams::new(variance, lengthscale, None)?,
        )
    }

    pub fn arc_cosine0(input_dim: usize, variance: f64) -> Result<Self> {
        Self::leaf(
            LeafKind::ArcCosine0,
            input_dim,
            KernelParams::new(variance, 1.0, None)?,
        )
    }

    pub fn sum(children: Vec<Kernel>) -> Result<Self> {
        if children.len() < 2 {
            return Err(Error::Input("a sum kernel needs at least two children".into()));
        }
        let d = children[0].input_dim();
        if children.iter().any(|c| c.input_dim() != d) {
            return Err(Error::Dimension("sum kernel children disagree on input dim".into()));
        }
        Ok(Kernel::Sum(children))
    }

    pub fn warped(net: WarpNet, base: Kernel) -> Result<Self> {
        if !matches!(base, Kernel::Leaf { .. }) {
            return Err(Error::Input("the base of a warped kernel must be a leaf".into()));
        }
        if base.input_dim() != net.output_dim() {
            return Err(Error::Dimension(format!(
                "warp output width {} differs from base kernel input dim {}",
                net.output_dim(),
                base.input_dim()
            )));
        }
        Ok(Kernel::Warped {
            net,
            base: Box::new(base),
        })
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Kernel::Leaf { input_dim, .. } => *input_dim,
            Kernel::Sum(c) => c[0].input_dim(),
            Kernel::Warped { net, .. } => net.input_dim(),
        }
    }

    /// `k(x, x)`; identical for every `x` for all supported kernels.
    pub fn prior_variance(&self) -> f64 {
        match self {
            Kernel::Leaf { params, .. } => params.variance(),
            Kernel::Sum(c) => c.iter().map(Kernel::prior_variance).sum(),
            Kernel::Warped { base, .. } => base.prior_variance(),
        }
    }

    fn check_dim(&self, n: usize, what: &str) -> Result<()> {
        if n != self.input_dim() {
            return Err(Error::Dimension(format!(
                "{what} has dimension {n}, kernel expects {}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check_dim(x.len(), "x")?;
        self.check_dim(y.len(), "y")?;
        Ok(self.eval_unchecked(x, y))
    }

    fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Kernel::Leaf { kind, params, .. } => {
                let var = params.variance();
                match kind {
                    LeafKind::Rbf => {
                        let r2: f64 = x
                            .iter()
                            .zip(y)
                            .enumerate()
                            .map(|(i, (a, b))| ((a - b) / params.lengthscale(i)).powi(2))
                            .sum();
                        var * (-0.5 * r2).exp()
                    }
                    LeafKind::Matern12 => {
                        let r2: f64 = x
                            .iter()
                            .zip(y)
                            .enumerate()
                            .map(|(i, (a, b))| ((a - b) / params.lengthscale(i)).powi(2))
                            .sum();
                        var * (-r2.sqrt()).exp()
                    }
                    LeafKind::ArcCosine0 => {
                        let xs: Vec<f64> =
                            x.iter().enumerate().map(|(i, a)| a / params.lengthscale(i)).collect();
                        let ys: Vec<f64> =
                            y.iter().enumerate().map(|(i, a)| a / params.lengthscale(i)).collect();
                        var * (1.0 - angle_between(&xs, &ys) / PI)
                    }
                }
            }
            Kernel::Sum(children) => children.iter().map(|c| c.eval_unchecked(x, y)).sum(),
            Kernel::Warped { net, base } => {
                let wx = net.warp(x).expect("checked dims");
                let wy = net.warp(y).expect("checked dims");
                base.eval_unchecked(&wx, &wy)
            }
        }
    }

    /// Covariance matrix of the rows of `x` with `jitter` added to the diagonal.
    pub fn gram(&self, x: &DMatrix<f64>, jitter: f64) -> Result<DMatrix<f64>> {
        if x.nrows() == 0 {
            return Err(Error::Input("gram needs at least one input row".into()));
        }
        let mut k = self.cross(x, x)?;
        // exact symmetry regardless of evaluation order
        for i in 0..k.nrows() {
            for j in 0..i {
                k[(j, i)] = k[(i, j)];
            }
            k[(i, i)] += jitter;
        }
        Ok(k)
    }

    pub fn cross(&self, x: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(x.ncols(), "x")?;
        self.check_dim(z.ncols(), "z")?;
        if let Kernel::Warped { net, base } = self {
            return base.cross(&net.warp_rows(x), &net.warp_rows(z));
        }
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            m.row_iter().map(|r| r.iter().copied().collect()).collect()
        };
        let (xr, zr) = (rows(x), rows(z));
        Ok(DMatrix::from_fn(xr.len(), zr.len(), |i, j| {
            self.eval_unchecked(&xr[i], &zr[j])
        }))
    }

    /// Number of parameter tensors, in visit order.
    pub fn num_tensors(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, _| n += 1);
        n
    }

    /// Recorded cross-covariance `k(x, z)`; `z = None` gives the Gram matrix
    /// of `x` (without jitter).
    pub fn graph_cross(&self, g: &mut Graph, vars: &[Var], x: Var, z: Option<Var>) -> Var {
        let mut cur = VarCursor::new(vars);
        let out = self.graph_cross_inner(g, &mut cur, x, z);
        debug_assert_eq!(cur.position(), vars.len());
        out
    }

    fn graph_cross_inner(&self, g: &mut Graph, cur: &mut VarCursor, x: Var, z: Option<Var>) -> Var {
        match self {
            Kernel::Leaf { kind, .. } => {
                let raw_var = cur.next();
                let raw_ls = cur.next();
                let var = g.softplus(raw_var);
                let ls = g.softplus(raw_ls);
                let xs = g.div(x, ls);
                let zs = match z {
                    Some(z) => g.div(z, ls),
                    None => xs,
                };
                let unit = match kind {
                    LeafKind::Rbf => {
                        let d = g.sq_dist(xs, zs);
                        let d = g.scale(d, -0.5);
                        g.exp(d)
                    }
                    LeafKind::Matern12 => {
                        let d = g.sq_dist(xs, zs);
                        let r = g.sqrt(d);
                        let r = g.neg(r);
                        g.exp(r)
                    }
                    LeafKind::ArcCosine0 => g.arccos0(xs, zs),
                };
                g.mul(unit, var)
            }
            Kernel::Sum(children) => {
                let mut acc = children[0].graph_cross_inner(g, cur, x, z);
                for c in &children[1..] {
                    let k = c.graph_cross_inner(g, cur, x, z);
                    acc = g.add(acc, k);
                }
                acc
            }
            Kernel::Warped { net, base } => {
                let warp_vars: Vec<Var> = (0..2 * net.layers.len()).map(|_| cur.next()).collect();
                let wx = net.graph(g, &warp_vars, x);
                let wz = z.map(|z| net.graph(g, &warp_vars, z));
                base.graph_cross_inner(g, cur, wx, wz)
            }
        }
    }

    /// Recorded `k(x_i, x_i)` for every row, as an `n×1` column.
    pub fn graph_diag(&self, g: &mut Graph, vars: &[Var], x: Var) -> Var {
        let n = g.shape(x).0;
        let mut cur = VarCursor::new(vars);
        let v = self.graph_variance(g, &mut cur);
        let ones = g.constant(DMatrix::from_element(n, 1, 1.0));
        g.mul(ones, v)
    }

    /// Recorded [`Kernel::prior_variance`] as a `1×1` node.
    pub fn graph_prior_variance(&self, g: &mut Graph, vars: &[Var]) -> Var {
        self.graph_variance(g, &mut VarCursor::new(vars))
    }

    fn graph_variance(&self, g: &mut Graph, cur: &mut VarCursor) -> Var {
        match self {
            Kernel::Leaf { .. } => {
                let raw_var = cur.next();
                let _ = cur.next();
                g.softplus(raw_var)
            }
            Kernel::Sum(children) => {
                let mut acc = children[0].graph_variance(g, cur);
                for c in &children[1..] {
                    let v = c.graph_variance(g, cur);
                    acc = g.add(acc, v);
                }
                acc
            }
            Kernel::Warped { net, base } => {
                for _ in 0..2 * net.layers.len() {
                    cur.next();
                }
                base.graph_variance(g, cur)
            }
        }
    }
}

impl Parameterized for Kernel {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &DMatrix<f64>)) {
        match self {
            Kernel::Leaf { params, .. } => {
                f(&join(prefix, "raw_variance"), &params.raw_variance);
                f(&join(prefix, "raw_lengthscales"), &params.raw_lengthscales);
            }
            Kernel::Sum(children) => {
                for (i, c) in children.iter().enumerate() {
                    c.visit_params(&join(prefix, &i.to_string()), f);
                }
            }
            Kernel::Warped { net, base } => {
                net.visit(&join(prefix, "warp"), f);
                base.visit_params(&join(prefix, "base"), f);
            }
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut DMatrix<f64>)) {
        match self {
            Kernel::Leaf { params, .. } => {
                f(&join(prefix, "raw_variance"), &mut params.raw_variance);
                f(&join(prefix, "raw_lengthscales"), &mut params.raw_lengthscales);
            }
            Kernel::Sum(children) => {
                for (i, c) in children.iter_mut().enumerate() {
                    c.visit_params_mut(&join(prefix, &i.to_string()), f);
                }
            }
            Kernel::Warped { net, base } => {
                net.visit_mut(&join(prefix, "warp"), f);
                base.visit_params_mut(&join(prefix, "base"), f);
            }
        }
    }
}

/// Jitter levels tried by [`cholesky_jittered`], relative to the kernel variance.
pub const JITTER_LEVELS: [f64; 5] = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2];

/// Cholesky factor of `k + jitter·I`, escalating the jitter from
/// `1e-6·scale` by factors of ten up to `1e-2·scale`.
pub fn cholesky_jittered(k: &DMatrix<f64>, scale: f64) -> Result<(DMatrix<f64>, f64)> {
    let mut tried = Vec::new();
    for rel in JITTER_LEVELS {
        let jitter = rel * scale;
        tried.push(jitter);
        let mut a = k.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += jitter;
        }
        if let Some(c) = nalgebra::Cholesky::new(a) {
            return Ok((c.unpack(), jitter));
        }
    }
    Err(Error::Cholesky { jitters: tried })
}

/// Recorded counterpart of [`cholesky_jittered`]. `scale` is a `1×1` node,
/// so the jitter is differentiated along with it.
pub fn graph_cholesky_jittered(g: &mut Graph, k: Var, scale: Var) -> Result<(Var, f64)> {
    let mut tried = Vec::new();
    let scale_value = g.scalar_value(scale);
    let n = g.shape(k).0;
    for rel in JITTER_LEVELS {
        let jitter = rel * scale_value;
        tried.push(jitter);
        // probe before recording so failed attempts leave no nodes behind
        let mut a = g.value(k).clone();
        for i in 0..a.nrows() {
            a[(i, i)] += jitter;
        }
        if nalgebra::Cholesky::new(a).is_none() {
            continue;
        }
        let eye = g.constant(DMatrix::identity(n, n));
        let j = g.scale(scale, rel);
        let j = g.mul(eye, j);
        let a = g.add(k, j);
        match g.cholesky(a) {
            Ok(l) => return Ok((l, jitter)),
            Err(GraphError::NotPositiveDefinite) | Err(GraphError::SingularTriangular) => continue,
        }
    }
    Err(Error::Cholesky { jitters: tried })
}
