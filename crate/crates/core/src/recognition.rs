//! Bi-directional GRU recognition network.
//!
//! An episode is presented as a `T×(O+P)` matrix whose row `t` is the
//! observation and the action of that step side by side. A forward and a
//! backward GRU run over the rows; affine heads on the concatenated hidden
//! states give each transition's `A_t` and `L_t`, and a head on the backward
//! state after the first row gives `(m_0, L_0)`.
//!
//! Vectors are rows throughout, so a gate pre-activation is `x W + h U + b`.

use crate::autodiff::{inv_softplus, packed_len, sigmoid, softplus, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{join, Parameterized, VarCursor};
use crate::state_posterior::{GaussMarkov, GaussMarkovVars};
use nalgebra::{DMatrix, DVector, RowDVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Initial standard deviation of the per-step transition noise.
const INIT_NOISE_SCALE: f64 = 0.1;
const INPUT_INIT_RANGE: f64 = 0.1;
const HEAD_INIT_RANGE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct GruCell {
    /// Input weights for the update, reset and candidate gates, `I×3H`.
    pub w_in: DMatrix<f64>,
    /// Recurrent weights for the update and reset gates, `H×2H`.
    pub u_zr: DMatrix<f64>,
    /// Recurrent weights for the candidate, `H×H`.
    pub u_h: DMatrix<f64>,
    /// Gate biases, `1×3H`.
    pub bias: DMatrix<f64>,
}

fn orthogonal(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let qr = a.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn uniform(r: usize, c: usize, range: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-range..range))
}

impl GruCell {
    pub fn new(input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut u_zr = DMatrix::zeros(hidden, 2 * hidden);
        u_zr.columns_mut(0, hidden).copy_from(&orthogonal(hidden, rng));
        u_zr.columns_mut(hidden, hidden).copy_from(&orthogonal(hidden, rng));
        Self {
            w_in: uniform(input_dim, 3 * hidden, INPUT_INIT_RANGE, rng),
            u_zr,
            u_h: orthogonal(hidden, rng),
            bias: DMatrix::zeros(1, 3 * hidden),
        }
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            w_in: DMatrix::zeros(input_dim, 3 * hidden),
            u_zr: DMatrix::zeros(hidden, 2 * hidden),
            u_h: DMatrix::zeros(hidden, hidden),
            bias: DMatrix::zeros(1, 3 * hidden),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_in.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.u_h.nrows()
    }

    /// One GRU update: `z = σ(x W_z + h U_z + b_z)`, `r = σ(x W_r + h U_r + b_r)`,
    /// `h̃ = tanh(x W_h + (r⊙h) U_h + b_h)`, `h' = (1−z)⊙h + z⊙h̃`.
    pub fn step(&self, h_prev: &RowDVector<f64>, input: &RowDVector<f64>) -> Result<RowDVector<f64>> {
        let h = self.hidden_dim();
        if h_prev.len() != h || input.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "GRU step expects hidden {h} and input {}, got {} and {}",
                self.input_dim(),
                h_prev.len(),
                input.len()
            )));
        }
        let xw = input * &self.w_in + &self.bias;
        let hu = h_prev * &self.u_zr;
        let z = RowDVector::from_fn(h, |_, j| sigmoid(xw[j] + hu[j]));
        let r = RowDVector::from_fn(h, |_, j| sigmoid(xw[h + j] + hu[h + j]));
        let rh = r.component_mul(h_prev);
        let rhu = rh * &self.u_h;
        Ok(RowDVector::from_fn(h, |_, j| {
            let cand = (xw[2 * h + j] + rhu[j]).tanh();
            (1.0 - z[j]) * h_prev[j] + z[j] * cand
        }))
    }

    /// Hidden states after each row of `inputs`, in processing order.
    fn run(&self, inputs: impl Iterator<Item = RowDVector<f64>>) -> Result<Vec<RowDVector<f64>>> {
        let mut h = RowDVector::zeros(self.hidden_dim());
        let mut out = Vec::new();
        for x in inputs {
            h = self.step(&h, &x)?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

impl Parameterized for GruCell {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &DMatrix<f64>)) {
        f(&join(prefix, "w_in"), &self.w_in);
        f(&join(prefix, "u_zr"), &self.u_zr);
        f(&join(prefix, "u_h"), &self.u_h);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut DMatrix<f64>)) {
        f(&join(prefix, "w_in"), &mut self.w_in);
        f(&join(prefix, "u_zr"), &mut self.u_zr);
        f(&join(prefix, "u_h"), &mut self.u_h);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Affine map `x W + b` on row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: DMatrix<f64>,
    pub bias: DMatrix<f64>,
}

impl Affine {
    fn apply(&self, x: &RowDVector<f64>) -> RowDVector<f64> {
        let y = x * &self.weight + &self.bias;
        RowDVector::from_iterator(y.len(), y.iter().copied())
    }
}

impl Parameterized for Affine {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &DMatrix<f64>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut DMatrix<f64>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecognitionNet {
    pub fwd: GruCell,
    pub bwd: GruCell,
    /// `2H → D²`, row-major reshape into `A_t`.
    pub head_a: Affine,
    /// `2H → D(D+1)/2`, packed lower triangle of `L_t`.
    pub head_l: Affine,
    /// `H → D + D(D+1)/2`: `m_0` followed by the packed `L_0`.
    pub head_init: Affine,
    state_dim: usize,
}

/// Row-major packed lower triangle with softplus on the diagonal.
fn unpack_lower(packed: &[f64], n: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in 0..=i {
            l[(i, j)] = if i == j { softplus(packed[k]) } else { packed[k] };
            k += 1;
        }
    }
    l
}

fn packed_diag_positions(n: usize) -> impl Iterator<Item = usize> {
    (0..n).map(|i| packed_len(i + 1) - 1)
}

impl RecognitionNet {
    pub fn new(input_dim: usize, hidden: usize, state_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || state_dim == 0 {
            return Err(Error::Input("recognition dimensions must be ≥ 1".into()));
        }
        let d = state_dim;
        let p = packed_len(d);
        let fwd = GruCell::new(input_dim, hidden, rng);
        let bwd = GruCell::new(input_dim, hidden, rng);
        let mut b_a = DMatrix::zeros(1, d * d);
        for i in 0..d {
            b_a[i * d + i] = 1.0;
        }
        let mut b_l = DMatrix::zeros(1, p);
        for k in packed_diag_positions(d) {
            b_l[k] = inv_softplus(INIT_NOISE_SCALE);
        }
        Ok(Self {
            head_a: Affine {
                weight: uniform(2 * hidden, d * d, HEAD_INIT_RANGE, rng),
                bias: b_a,
            },
            head_l: Affine {
                weight: uniform(2 * hidden, p, HEAD_INIT_RANGE, rng),
                bias: b_l,
            },
            head_init: Affine {
                weight: uniform(hidden, d + p, HEAD_INIT_RANGE, rng),
                bias: DMatrix::zeros(1, d + p),
            },
            fwd,
            bwd,
            state_dim,
        })
    }

    /// All weights and biases zero.
    pub fn zeros(input_dim: usize, hidden: usize, state_dim: usize) -> Self {
        let d = state_dim;
        let p = packed_len(d);
        let affine = |i: usize, o: usize| Affine {
            weight: DMatrix::zeros(i, o),
            bias: DMatrix::zeros(1, o),
        };
        Self {
            fwd: GruCell::zeros(input_dim, hidden),
            bwd: GruCell::zeros(input_dim, hidden),
            head_a: affine(2 * hidden, d * d),
            head_l: affine(2 * hidden, p),
            head_init: affine(hidden, d + p),
            state_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.fwd.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.fwd.hidden_dim()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn check_episode(&self, inputs: &DMatrix<f64>) -> Result<()> {
        if inputs.nrows() == 0 {
            return Err(Error::Input("cannot encode an empty episode".into()));
        }
        if inputs.ncols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "episode rows have {} entries, the recognition net expects {}",
                inputs.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Forward and backward hidden states, both indexed by time (row `t` of
    /// the backward sequence is its state after consuming rows `t..T`).
    pub fn hidden_states(
        &self,
        inputs: &DMatrix<f64>,
    ) -> Result<(Vec<RowDVector<f64>>, Vec<RowDVector<f64>>)> {
        self.check_episode(inputs)?;
        let rows = |i: usize| inputs.row(i).into_owned();
        let t = inputs.nrows();
        let hf = self.fwd.run((0..t).map(rows))?;
        let mut hb = self.bwd.run((0..t).rev().map(rows))?;
        hb.reverse();
        Ok((hf, hb))
    }

    pub fn encode(&self, inputs: &DMatrix<f64>) -> Result<GaussMarkov> {
        let (hf, hb) = self.hidden_states(inputs)?;
        let d = self.state_dim;
        let mut a = Vec::with_capacity(hf.len());
        let mut l = Vec::with_capacity(hf.len());
        for (f, b) in hf.iter().zip(&hb) {
            let cat = RowDVector::from_iterator(f.len() + b.len(), f.iter().chain(b.iter()).copied());
            let av = self.head_a.apply(&cat);
            a.push(DMatrix::from_row_slice(d, d, av.as_slice()));
            l.push(unpack_lower(self.head_l.apply(&cat).as_slice(), d));
        }
        let init = self.head_init.apply(&hb[0]);
        let m0 = DVector::from_column_slice(&init.as_slice()[..d]);
        let l0 = unpack_lower(&init.as_slice()[d..], d);
        GaussMarkov::new(m0, l0, a, l)
    }
}

impl Parameterized for RecognitionNet {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &DMatrix<f64>)) {
        self.fwd.visit_params(&join(prefix, "fwd"), f);
        self.bwd.visit_params(&join(prefix, "bwd"), f);
        self.head_a.visit_params(&join(prefix, "head_a"), f);
        self.head_l.visit_params(&join(prefix, "head_l"), f);
        self.head_init.visit_params(&join(prefix, "head_init"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut DMatrix<f64>)) {
        self.fwd.visit_params_mut(&join(prefix, "fwd"), f);
        self.bwd.visit_params_mut(&join(prefix, "bwd"), f);
        self.head_a.visit_params_mut(&join(prefix, "head_a"), f);
        self.head_l.visit_params_mut(&join(prefix, "head_l"), f);
        self.head_init.visit_params_mut(&join(prefix, "head_init"), f);
    }
}

#[derive(Clone, Copy)]
struct CellVars {
    w_in: Var,
    u_zr: Var,
    u_h: Var,
    bias: Var,
}

impl CellVars {
    fn take(cur: &mut VarCursor) -> Self {
        Self {
            w_in: cur.next(),
            u_zr: cur.next(),
            u_h: cur.next(),
            bias: cur.next(),
        }
    }

    /// Hidden states as a `T×H` matrix in processing order.
    fn run(&self, g: &mut Graph, inputs: Var, hidden: usize, order: &[usize]) -> Vec<Var> {
        let xw = g.matmul(inputs, self.w_in);
        let xw = g.add(xw, self.bias);
        let mut h = g.constant(DMatrix::zeros(1, hidden));
        let mut out = Vec::with_capacity(order.len());
        for &t in order {
            let x = g.rows(xw, t, 1);
            let hu = g.matmul(h, self.u_zr);
            let pre_zr = g.cols(x, 0, 2 * hidden);
            let pre_zr = g.add(pre_zr, hu);
            let zr = g.sigmoid(pre_zr);
            let z = g.cols(zr, 0, hidden);
            let r = g.cols(zr, hidden, hidden);
            let rh = g.mul(r, h);
            let rhu = g.matmul(rh, self.u_h);
            let xc = g.cols(x, 2 * hidden, hidden);
            let pre_c = g.add(xc, rhu);
            let cand = g.tanh(pre_c);
            let diff = g.sub(cand, h);
            let step = g.mul(z, diff);
            h = g.add(h, step);
            out.push(h);
        }
        out
    }
}

/// Recorded recognition network bound to graph leaves.
pub struct RecognitionGraph<'a> {
    net: &'a RecognitionNet,
    fwd: CellVars,
    bwd: CellVars,
    head_a: (Var, Var),
    head_l: (Var, Var),
    head_init: (Var, Var),
}

impl<'a> RecognitionGraph<'a> {
    /// Consume the net's leaves from `cur` in visit order.
    pub fn build(net: &'a RecognitionNet, cur: &mut VarCursor) -> Self {
        let fwd = CellVars::take(cur);
        let bwd = CellVars::take(cur);
        let mut pair = || (cur.next(), cur.next());
        let head_a = pair();
        let head_l = pair();
        let head_init = pair();
        Self {
            net,
            fwd,
            bwd,
            head_a,
            head_l,
            head_init,
        }
    }

    pub fn encode(&self, g: &mut Graph, inputs: &DMatrix<f64>) -> Result<GaussMarkovVars> {
        self.net.check_episode(inputs)?;
        let (t, h, d) = (inputs.nrows(), self.net.hidden_dim(), self.net.state_dim);
        let x = g.constant(inputs.clone());
        let order: Vec<usize> = (0..t).collect();
        let hf = self.fwd.run(g, x, h, &order);
        let rev: Vec<usize> = (0..t).rev().collect();
        let mut hb = self.bwd.run(g, x, h, &rev);
        hb.reverse();

        let hf_all = g.vcat(&hf);
        let hb_all = g.vcat(&hb);
        let cat = g.hcat(&[hf_all, hb_all]);
        let a_all = g.matmul(cat, self.head_a.0);
        let a_all = g.add(a_all, self.head_a.1);
        let l_all = g.matmul(cat, self.head_l.0);
        let l_all = g.add(l_all, self.head_l.1);
        let mut a = Vec::with_capacity(t);
        let mut l = Vec::with_capacity(t);
        for s in 0..t {
            let row = g.rows(a_all, s, 1);
            a.push(g.reshape(row, d, d));
            let row = g.rows(l_all, s, 1);
            l.push(g.packed_lower(row));
        }
        let init = g.matmul(hb[0], self.head_init.0);
        let init = g.add(init, self.head_init.1);
        let m0 = g.cols(init, 0, d);
        let m0 = g.transpose(m0);
        let l0 = g.cols(init, d, packed_len(d));
        let l0 = g.packed_lower(l0);
        Ok(GaussMarkovVars { m0, l0, a, l })
    }
}
