//! Gauss-Markov variational posterior over latent state trajectories.
//!
//! `q(x_0) = N(m_0, L_0 L_0ᵀ)` and `q(x_t | x_{t-1}) = N(A_t x_{t-1}, L_t L_tᵀ)`
//! for `t = 1..T`. Sampling is a chain of affine maps of standard-normal
//! noise, so the samples are differentiable in every parameter.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use std::f64::consts::{E, PI};

/// Largest `(T+1)·D` accepted by [`GaussMarkov::joint_covariance`].
pub const JOINT_COVARIANCE_LIMIT: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussMarkov {
    pub m0: DVector<f64>,
    pub l0: DMatrix<f64>,
    pub a: Vec<DMatrix<f64>>,
    pub l: Vec<DMatrix<f64>>,
}

fn check_factor(l: &DMatrix<f64>, d: usize, what: &str) -> Result<()> {
    if l.shape() != (d, d) {
        return Err(Error::Dimension(format!("{what} has shape {:?}, expected {d}×{d}", l.shape())));
    }
    for i in 0..d {
        if !(l[(i, i)] > 0.0) {
            return Err(Error::Input(format!(
                "{what} diagonal entry {i} is {} (must be > 0)",
                l[(i, i)]
            )));
        }
        for j in i + 1..d {
            if l[(i, j)] != 0.0 {
                return Err(Error::Input(format!("{what} is not lower-triangular")));
            }
        }
    }
    Ok(())
}

impl GaussMarkov {
    pub fn new(
        m0: DVector<f64>,
        l0: DMatrix<f64>,
        a: Vec<DMatrix<f64>>,
        l: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let q = Self { m0, l0, a, l };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.m0.len();
        if d == 0 {
            return Err(Error::Input("state dimension must be ≥ 1".into()));
        }
        if self.a.len() != self.l.len() {
            return Err(Error::Dimension(format!(
                "{} transition matrices but {} noise factors",
                self.a.len(),
                self.l.len()
            )));
        }
        check_factor(&self.l0, d, "L_0")?;
        for (t, (a, l)) in self.a.iter().zip(&self.l).enumerate() {
            if a.shape() != (d, d) {
                return Err(Error::Dimension(format!("A_{} is not {d}×{d}", t + 1)));
            }
            check_factor(l, d, &format!("L_{}", t + 1))?;
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.m0.len()
    }

    /// Number of transitions `T`.
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    /// Trajectory `(T+1)×D` from standard-normal draws `eps` of the same shape.
    pub fn sample_trajectory(&self, eps: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (t1, d) = (self.len() + 1, self.state_dim());
        if eps.shape() != (t1, d) {
            return Err(Error::Dimension(format!(
                "noise has shape {:?}, expected {t1}×{d}",
                eps.shape()
            )));
        }
        let mut out = DMatrix::zeros(t1, d);
        let e0 = eps.row(0).transpose();
        let mut x = &self.m0 + &self.l0 * e0;
        out.row_mut(0).copy_from(&x.transpose());
        for t in 1..t1 {
            let e = eps.row(t).transpose();
            x = &self.a[t - 1] * &x + &self.l[t - 1] * e;
            out.row_mut(t).copy_from(&x.transpose());
        }
        Ok(out)
    }

    /// Marginal moments `(m_t, S_t)` for `t = 0..T`.
    pub fn marginals(&self) -> Vec<(DVector<f64>, DMatrix<f64>)> {
        let mut out = Vec::with_capacity(self.len() + 1);
        let mut m = self.m0.clone();
        let mut s = &self.l0 * self.l0.transpose();
        out.push((m.clone(), s.clone()));
        for (a, l) in self.a.iter().zip(&self.l) {
            m = a * &m;
            s = a * &s * a.transpose() + l * l.transpose();
            s = (&s + s.transpose()) * 0.5;
            out.push((m.clone(), s.clone()));
        }
        out
    }

    /// `H[q] = ((T+1)D/2)·log(2πe) + Σ_t log det L_t`.
    pub fn entropy(&self) -> Result<f64> {
        let d = self.state_dim();
        let mut logdet = 0.0;
        for l in std::iter::once(&self.l0).chain(&self.l) {
            for i in 0..d {
                let v = l[(i, i)];
                if !(v > 0.0) {
                    return Err(Error::Input(format!(
                        "noise factor has non-positive diagonal entry {v}"
                    )));
                }
                logdet += v.ln();
            }
        }
        Ok(((self.len() + 1) * d) as f64 / 2.0 * (2.0 * PI * E).ln() + logdet)
    }

    /// Dense covariance of the stacked trajectory `[x_0; x_1; …; x_T]`.
    pub fn joint_covariance(&self) -> Result<DMatrix<f64>> {
        let (t1, d) = (self.len() + 1, self.state_dim());
        if t1 * d > JOINT_COVARIANCE_LIMIT {
            return Err(Error::Input(format!(
                "joint covariance of size {} exceeds the limit {JOINT_COVARIANCE_LIMIT}",
                t1 * d
            )));
        }
        let mut c = DMatrix::zeros(t1 * d, t1 * d);
        let marg = self.marginals();
        for t in 0..t1 {
            c.view_mut((t * d, t * d), (d, d)).copy_from(&marg[t].1);
            // Cov(x_t, x_s) = A_t Cov(x_{t-1}, x_s) for s < t
            for s in 0..t {
                let prev = c.view(((t - 1) * d, s * d), (d, d)).into_owned();
                let block = &self.a[t - 1] * prev;
                c.view_mut((t * d, s * d), (d, d)).copy_from(&block);
                c.view_mut((s * d, t * d), (d, d)).copy_from(&block.transpose());
            }
        }
        Ok(c)
    }
}

/// Graph handles for a Gauss-Markov posterior. `m0` is `D×1`; the other
/// entries are `D×D`.
#[derive(Clone, Debug)]
pub struct GaussMarkovVars {
    pub m0: Var,
    pub l0: Var,
    pub a: Vec<Var>,
    pub l: Vec<Var>,
}

impl GaussMarkovVars {
    /// Record the parameters of `q` as graph leaves.
    pub fn leaves(g: &mut Graph, q: &GaussMarkov) -> Self {
        let d = q.state_dim();
        Self {
            m0: g.leaf(DMatrix::from_column_slice(d, 1, q.m0.as_slice())),
            l0: g.leaf(q.l0.clone()),
            a: q.a.iter().map(|a| g.leaf(a.clone())).collect(),
            l: q.l.iter().map(|l| g.leaf(l.clone())).collect(),
        }
    }

    /// Read the current values back out.
    pub fn to_gauss_markov(&self, g: &Graph) -> GaussMarkov {
        GaussMarkov {
            m0: DVector::from_column_slice(g.value(self.m0).as_slice()),
            l0: g.value(self.l0).clone(),
            a: self.a.iter().map(|v| g.value(*v).clone()).collect(),
            l: self.l.iter().map(|v| g.value(*v).clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    /// Recorded reparameterised sample, `(T+1)×D`.
    pub fn sample(&self, g: &mut Graph, eps: &DMatrix<f64>) -> Var {
        let d = g.shape(self.m0).0;
        assert_eq!(eps.shape(), (self.len() + 1, d), "noise shape mismatch");
        let col = |t: usize| DMatrix::from_fn(d, 1, |i, _| eps[(t, i)]);
        let e0 = g.constant(col(0));
        let n0 = g.matmul(self.l0, e0);
        let mut x = g.add(self.m0, n0);
        let mut rows = vec![g.transpose(x)];
        for t in 0..self.len() {
            let e = g.constant(col(t + 1));
            let mean = g.matmul(self.a[t], x);
            let noise = g.matmul(self.l[t], e);
            x = g.add(mean, noise);
            rows.push(g.transpose(x));
        }
        g.vcat(&rows)
    }

    /// Marginal means of `x_1..x_T` stacked as a `T×D` matrix, plus
    /// `Σ_{t=1}^T S_t`.
    pub fn marginal_summary(&self, g: &mut Graph) -> (Var, Var) {
        let mut m = self.m0;
        let l0t = g.transpose(self.l0);
        let mut s = g.matmul(self.l0, l0t);
        let mut means = Vec::with_capacity(self.len());
        let mut cov_sum: Option<Var> = None;
        for t in 0..self.len() {
            let a = self.a[t];
            m = g.matmul(a, m);
            let at = g.transpose(a);
            let asa = g.matmul(a, s);
            let asa = g.matmul(asa, at);
            let lt = g.transpose(self.l[t]);
            let ll = g.matmul(self.l[t], lt);
            s = g.add(asa, ll);
            means.push(g.transpose(m));
            cov_sum = Some(match cov_sum {
                Some(c) => g.add(c, s),
                None => s,
            });
        }
        let means = g.vcat(&means);
        (means, cov_sum.expect("at least one transition"))
    }

    /// Recorded entropy.
    pub fn entropy(&self, g: &mut Graph) -> Var {
        let d = g.shape(self.m0).0;
        let mut total = None;
        for l in std::iter::once(self.l0).chain(self.l.iter().copied()) {
            let diag = g.diag(l);
            let logd = g.log(diag);
            let s = g.sum(logd);
            total = Some(match total {
                Some(t) => g.add(t, s),
                None => s,
            });
        }
        let c = ((self.len() + 1) * d) as f64 / 2.0 * (2.0 * PI * E).ln();
        g.offset(total.expect("L_0 always present"), c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_q(rng: &mut ChaCha8Rng, t: usize, d: usize) -> GaussMarkov {
        let lower = |rng: &mut ChaCha8Rng| {
            DMatrix::from_fn(d, d, |i, j| match i.cmp(&j) {
                std::cmp::Ordering::Greater => rng.random_range(-0.5..0.5),
                std::cmp::Ordering::Equal => rng.random_range(0.2..1.0),
                std::cmp::Ordering::Less => 0.0,
            })
        };
        GaussMarkov::new(
            DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)),
            lower(rng),
            (0..t)
                .map(|_| DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0)))
                .collect(),
            (0..t).map(|_| lower(rng)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_noise_sample_is_mean_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_q(&mut rng, 4, 2);
        let x = q.sample_trajectory(&DMatrix::zeros(5, 2)).unwrap();
        let mut m = q.m0.clone();
        assert_eq!(x.row(0).transpose(), m);
        for t in 0..4 {
            m = &q.a[t] * m;
            assert!((x.row(t + 1).transpose() - &m).norm() < 1e-14);
        }
    }

    #[test]
    fn zero_transitions_give_independent_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut q = random_q(&mut rng, 3, 2);
        q.a.iter_mut().for_each(|a| a.fill(0.0));
        let eps = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-2.0..2.0));
        let x = q.sample_trajectory(&eps).unwrap();
        for t in 1..4 {
            let expect = &q.l[t - 1] * eps.row(t).transpose();
            assert!((x.row(t).transpose() - expect).norm() < 1e-14);
        }
        let marg = q.marginals();
        for t in 1..4 {
            assert_eq!(marg[t].0, DVector::zeros(2));
            assert!((&marg[t].1 - &q.l[t - 1] * q.l[t - 1].transpose()).abs().max() < 1e-14);
        }
    }

    #[test]
    fn scalar_recursion_by_hand() {
        let q = GaussMarkov::new(
            DVector::from_vec(vec![0.5]),
            dmatrix![0.3],
            vec![dmatrix![0.9], dmatrix![-1.2]],
            vec![dmatrix![0.2], dmatrix![0.7]],
        )
        .unwrap();
        let eps = dmatrix![1.0; -0.5; 2.0];
        let x0 = 0.5 + 0.3 * 1.0;
        let x1 = 0.9 * x0 + 0.2 * -0.5;
        let x2 = -1.2 * x1 + 0.7 * 2.0;
        let x = q.sample_trajectory(&eps).unwrap();
        assert!((x[0] - x0).abs() < 1e-15 && (x[1] - x1).abs() < 1e-15 && (x[2] - x2).abs() < 1e-15);
        assert!(q.sample_trajectory(&DMatrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn random_walk_variance_grows_linearly() {
        let d = 2;
        let q = GaussMarkov::new(
            DVector::zeros(d),
            DMatrix::identity(d, d),
            vec![DMatrix::identity(d, d); 5],
            vec![DMatrix::identity(d, d); 5],
        )
        .unwrap();
        for (t, (m, s)) in q.marginals().iter().enumerate() {
            assert_eq!(m, &DVector::zeros(d));
            assert!((s - DMatrix::identity(d, d) * (t + 1) as f64).abs().max() < 1e-14);
        }
    }

    #[test]
    fn entropy_values() {
        let q = GaussMarkov::new(DVector::zeros(1), dmatrix![1.0], vec![], vec![]).unwrap();
        assert!((q.entropy().unwrap() - 1.418_938_533_204_672_7).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_q(&mut rng, 3, 2);
        let mut scaled = q.clone();
        let c: f64 = 1.7;
        scaled.l0 *= c;
        scaled.l.iter_mut().for_each(|l| *l *= c);
        let diff = scaled.entropy().unwrap() - q.entropy().unwrap();
        assert!((diff - 4.0 * 2.0 * c.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_matches_dense_joint_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = random_q(&mut rng, 2, 2);
        let c = q.joint_covariance().unwrap();
        let n = c.nrows() as f64;
        let dense = 0.5 * (n * (2.0 * PI * E).ln() + c.determinant().ln());
        assert!((q.entropy().unwrap() - dense).abs() < 1e-8);
    }

    #[test]
    fn joint_covariance_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = random_q(&mut rng, 0, 3);
        assert!((q.joint_covariance().unwrap() - &q.l0 * q.l0.transpose()).abs().max() < 1e-15);
        let mut q = random_q(&mut rng, 3, 2);
        q.a.iter_mut().for_each(|a| a.fill(0.0));
        let c = q.joint_covariance().unwrap();
        for t in 0..4 {
            for s in 0..4 {
                let block = c.view((2 * t, 2 * s), (2, 2));
                if t != s {
                    assert_eq!(block.abs().max(), 0.0);
                }
            }
        }
        let big = GaussMarkov::new(
            DVector::zeros(1),
            dmatrix![1.0],
            vec![dmatrix![1.0]; 1000],
            vec![dmatrix![1.0]; 1000],
        )
        .unwrap();
        assert!(big.joint_covariance().is_err());
    }

    #[test]
    fn invalid_factors_are_rejected() {
        assert!(GaussMarkov::new(DVector::zeros(1), dmatrix![0.0], vec![], vec![]).is_err());
        assert!(GaussMarkov::new(
            DVector::zeros(2),
            dmatrix![1.0, 0.5; 0.0, 1.0],
            vec![],
            vec![]
        )
        .is_err());
    }

    #[test]
    fn recorded_paths_match_plain_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = random_q(&mut rng, 4, 3);
        let eps = DMatrix::from_fn(5, 3, |_, _| rng.random_range(-2.0..2.0));
        let mut g = Graph::new();
        let vars = GaussMarkovVars::leaves(&mut g, &q);
        let x = vars.sample(&mut g, &eps);
        assert!((g.value(x) - q.sample_trajectory(&eps).unwrap()).abs().max() < 1e-13);
        let (means, cov_sum) = vars.marginal_summary(&mut g);
        let marg = q.marginals();
        let mut s = DMatrix::zeros(3, 3);
        for t in 1..5 {
            assert!((g.value(means).row(t - 1).transpose() - &marg[t].0).norm() < 1e-13);
            s += &marg[t].1;
        }
        assert!((g.value(cov_sum) - s).abs().max() < 1e-12);
        let h = vars.entropy(&mut g);
        assert!((g.scalar_value(h) - q.entropy().unwrap()).abs() < 1e-12);
        assert_eq!(vars.to_gauss_markov(&g), q);
    }
}
