#![allow(dead_code)]

use gpssm::data::Episode;
use gpssm::elbo::EmissionModel;
use gpssm::kernels::Kernel;
use gpssm::model::Gpssm;
use gpssm::params::{ParamSet, Parameterized};
use gpssm::recognition::RecognitionNet;
use gpssm::sparse_gp::SparseGp;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small model with every parameter nudged away from its initial value.
pub fn tiny_model(rng: &mut ChaCha8Rng, kernel: Kernel, d: usize, o: usize, p: usize, m: usize, h: usize) -> Gpssm {
    // spread along the diagonal so K_zz stays well conditioned
    let z = DMatrix::from_fn(m, d + p, |i, _| {
        let t = if m == 1 { 0.0 } else { 3.0 * i as f64 / (m - 1) as f64 - 1.5 };
        t + rng.random_range(-0.2..0.2)
    });
    let gp = SparseGp::new(kernel, d, p, z, 0.1, 0.5).unwrap();
    let em = EmissionModel::new(
        DMatrix::from_fn(o, d, |_, _| rng.random_range(0.5..1.5)),
        DMatrix::from_fn(1, o, |_, _| rng.random_range(-0.5..0.5)),
        0.2,
    )
    .unwrap();
    let rec = RecognitionNet::new(o + p, h, d, rng).unwrap();
    let mut model = Gpssm::new(gp, em, rec).unwrap();
    jitter_params(&mut model, rng, 0.1);
    model
}

pub fn jitter_params(model: &mut impl Parameterized, rng: &mut ChaCha8Rng, scale: f64) {
    model.visit_params_mut("", &mut |_, m| {
        for v in m.iter_mut() {
            *v += scale * rng.random_range(-1.0..1.0);
        }
    });
}

pub fn random_episode(rng: &mut ChaCha8Rng, t: usize, o: usize, p: usize) -> Episode {
    Episode::new(
        DMatrix::from_fn(t, o, |_, _| rng.random_range(-1.0..1.0)),
        DMatrix::from_fn(t, p, |_, _| rng.random_range(-1.0..1.0)),
    )
    .unwrap()
}

/// Central differences of `f` with respect to every scalar parameter.
pub fn finite_difference<M: Parameterized + Clone>(model: &M, h: f64, f: impl Fn(&M) -> f64) -> ParamSet {
    let base = ParamSet::from_model(model);
    let mut out = base.zeros_like();
    let names: Vec<String> = base.names().map(String::from).collect();
    for name in names {
        let n = base.get(&name).unwrap().len();
        for i in 0..n {
            let eval = |delta: f64| {
                let mut p = base.clone();
                p.get_mut(&name).unwrap()[i] += delta;
                let mut m = model.clone();
                p.apply_to(&mut m).unwrap();
                f(&m)
            };
            out.get_mut(&name).unwrap()[i] = (eval(h) - eval(-h)) / (2.0 * h);
        }
    }
    out
}

/// Worst relative disagreement between two gradients; entries that agree
/// to `abs_floor` count as exact.
pub fn worst_relative_error(a: &ParamSet, b: &ParamSet, abs_floor: f64) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for ((name, x), (_, y)) in a.iter().zip(b.iter()) {
        for (i, (u, v)) in x.iter().zip(y.iter()).enumerate() {
            let diff = (u - v).abs();
            if diff <= abs_floor {
                continue;
            }
            let rel = diff / u.abs().max(v.abs());
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}]: analytic {u:e}, numeric {v:e}"));
            }
        }
    }
    worst
}

/// Exact log evidence of the scalar model
/// `x_0 ~ N(0, 1)`, `x_t = x_{t-1} + N(0, q)`, `y_t = w x_t + b + N(0, r)`
/// where `y` row `t` observes `x_{t+1}`.
pub fn kalman_log_evidence(y: &[f64], q: f64, w: f64, b: f64, r: f64) -> f64 {
    let (mut m, mut p) = (0.0, 1.0);
    let mut ll = 0.0;
    for &obs in y {
        p += q;
        let s = w * w * p + r;
        let e = obs - (w * m + b);
        ll += -0.5 * ((2.0 * std::f64::consts::PI * s).ln() + e * e / s);
        let k = p * w / s;
        m += k * e;
        p *= 1.0 - k * w;
    }
    ll
}

/// Means of the chain `x_t = A_t x_{t-1} + L_t e_t`.
pub fn chain_mean(m0: &DVector<f64>, a: &[DMatrix<f64>]) -> Vec<DVector<f64>> {
    let mut out = vec![m0.clone()];
    for at in a {
        let next = at * out.last().unwrap();
        out.push(next);
    }
    out
}

/// Gauss-Markov posterior with random means, transitions and factors.
pub fn random_gauss_markov(rng: &mut ChaCha8Rng, t: usize, d: usize) -> gpssm::state_posterior::GaussMarkov {
    let lower = |rng: &mut ChaCha8Rng| {
        DMatrix::from_fn(d, d, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => rng.random_range(-0.5..0.5),
            std::cmp::Ordering::Equal => rng.random_range(0.2..1.0),
            std::cmp::Ordering::Less => 0.0,
        })
    };
    gpssm::state_posterior::GaussMarkov::new(
        DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)),
        lower(rng),
        (0..t).map(|_| DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0))).collect(),
        (0..t).map(|_| lower(rng)).collect(),
    )
    .unwrap()
}

/// Closed-form ELBO of a scalar model whose transition is pinned to the
/// identity with noise `q`, identity emission with noise `r` and
/// `x_0 ~ N(0, 1)`.
pub fn random_walk_elbo(qx: &gpssm::state_posterior::GaussMarkov, y: &[f64], q: f64, r: f64) -> f64 {
    use std::f64::consts::{E, PI};
    let mg = qx.marginals();
    let (m, s): (Vec<f64>, Vec<f64>) = mg.iter().map(|(m, s)| (m[0], s[(0, 0)])).unzip();
    let mut total = -0.5 * (2.0 * PI).ln() - 0.5 * (m[0] * m[0] + s[0]);
    total += 0.5 * (2.0 * PI * E).ln() + qx.l0[(0, 0)].ln();
    for t in 1..m.len() {
        let a = qx.a[t - 1][(0, 0)];
        total += -0.5 * (2.0 * PI * r).ln() - ((y[t - 1] - m[t]).powi(2) + s[t]) / (2.0 * r);
        let sq = (m[t] - m[t - 1]).powi(2) + s[t] + s[t - 1] - 2.0 * a * s[t - 1];
        total += -0.5 * (2.0 * PI * q).ln() - sq / (2.0 * q);
        total += 0.5 * (2.0 * PI * E).ln() + qx.l[t - 1][(0, 0)].ln();
    }
    total
}
