//! Sparse variational posterior over the `D` transition functions.
//!
//! One GP per latent dimension, all sharing the kernel and the inducing
//! inputs `Z` (an `M×(D+P)` matrix in state-action space). The prior mean is
//! the identity on the state part, `η_d(x̃) = x^{(d)}`. Each `q(u_d)` is a
//! full Gaussian `N(μ_d, C_d C_dᵀ)` with `C_d` lower-triangular; its diagonal
//! is stored through softplus.
//!
//! All solves go through the Cholesky factor of `K_zz + jitter·I`.

use crate::autodiff::{inv_softplus, softplus, Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::{cholesky_jittered, graph_cholesky_jittered, Kernel};
use crate::params::{join, Parameterized, VarCursor};
use nalgebra::{DMatrix, DVector};

/// `q(u_d) = N(mu, chol·cholᵀ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalGaussian {
    pub mu: DVector<f64>,
    pub chol: DMatrix<f64>,
}

impl VariationalGaussian {
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.chol * self.chol.transpose()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseGp {
    pub kernel: Kernel,
    state_dim: usize,
    action_dim: usize,
    z: DMatrix<f64>,
    q_mu: DMatrix<f64>,
    q_raw_chol: Vec<DMatrix<f64>>,
    raw_sigma_f2: DMatrix<f64>,
}

impl SparseGp {
    /// Posterior initialised at `q(u_d) = N(η_d(Z), s²·K_zz)` where `s` is
    /// `init_chol_scale`.
    pub fn new(
        kernel: Kernel,
        state_dim: usize,
        action_dim: usize,
        z: DMatrix<f64>,
        sigma_f2: f64,
        init_chol_scale: f64,
    ) -> Result<Self> {
        if state_dim == 0 {
            return Err(Error::Input("state dimension must be ≥ 1".into()));
        }
        if z.nrows() == 0 {
            return Err(Error::Input("at least one inducing input is required".into()));
        }
        if z.ncols() != state_dim + action_dim || kernel.input_dim() != state_dim + action_dim {
            return Err(Error::Dimension(format!(
                "inducing inputs have {} columns and the kernel takes {}, expected D+P = {}",
                z.ncols(),
                kernel.input_dim(),
                state_dim + action_dim
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("inducing inputs must be finite".into()));
        }
        if !(sigma_f2 > 0.0) || !(init_chol_scale > 0.0) {
            return Err(Error::Input("σ_f² and the initial q(u) scale must be > 0".into()));
        }
        let kzz = kernel.gram(&z, 0.0)?;
        let (lz, _) = cholesky_jittered(&kzz, kernel.prior_variance())?;
        let mut gp = Self {
            q_mu: z.columns(0, state_dim).into_owned(),
            q_raw_chol: Vec::new(),
            raw_sigma_f2: DMatrix::from_element(1, 1, inv_softplus(sigma_f2)),
            kernel,
            state_dim,
            action_dim,
            z,
        };
        let chol = lz * init_chol_scale;
        for d in 0..state_dim {
            gp.q_raw_chol.push(DMatrix::zeros(chol.nrows(), chol.ncols()));
            gp.set_chol(d, &chol)?;
        }
        Ok(gp)
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn num_inducing(&self) -> usize {
        self.z.nrows()
    }

    pub fn inducing_inputs(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn set_inducing_inputs(&mut self, z: DMatrix<f64>) -> Result<()> {
        if z.shape() != self.z.shape() {
            return Err(Error::Dimension("inducing input shape cannot change".into()));
        }
        self.z = z;
        Ok(())
    }

    pub fn sigma_f2(&self) -> f64 {
        softplus(self.raw_sigma_f2[0])
    }

    pub fn set_sigma_f2(&mut self, v: f64) {
        self.raw_sigma_f2[0] = inv_softplus(v);
    }

    /// Prior mean at the inducing inputs, `η_d(Z)` for every `d` (`M×D`).
    pub fn prior_mean_at_inducing(&self) -> DMatrix<f64> {
        self.z.columns(0, self.state_dim).into_owned()
    }

    pub fn variational(&self, d: usize) -> VariationalGaussian {
        let raw = &self.q_raw_chol[d];
        let m = raw.nrows();
        let chol = DMatrix::from_fn(m, m, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => raw[(i, j)],
            std::cmp::Ordering::Equal => softplus(raw[(i, i)]),
            std::cmp::Ordering::Less => 0.0,
        });
        VariationalGaussian {
            mu: self.q_mu.column(d).into_owned(),
            chol,
        }
    }

    pub fn set_variational(&mut self, d: usize, q: &VariationalGaussian) -> Result<()> {
        if q.mu.len() != self.num_inducing() {
            return Err(Error::Dimension("q(u) mean length differs from M".into()));
        }
        self.q_mu.set_column(d, &q.mu);
        self.set_chol(d, &q.chol)
    }

    fn set_chol(&mut self, d: usize, chol: &DMatrix<f64>) -> Result<()> {
        let m = self.num_inducing();
        if chol.shape() != (m, m) {
            return Err(Error::Dimension("q(u) factor must be M×M".into()));
        }
        let raw = &mut self.q_raw_chol[d];
        for i in 0..m {
            if !(chol[(i, i)] > 0.0) {
                return Err(Error::Input("q(u) factor needs a positive diagonal".into()));
            }
            for j in 0..m {
                raw[(i, j)] = match i.cmp(&j) {
                    std::cmp::Ordering::Greater => chol[(i, j)],
                    std::cmp::Ordering::Equal => inv_softplus(chol[(i, i)]),
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
        Ok(())
    }

    /// Reset every `q(u_d)` to the prior `N(η_d(Z), K_zz)`.
    pub fn reset_to_prior(&mut self) -> Result<()> {
        let kzz = self.kernel.gram(&self.z, 0.0)?;
        let (lz, _) = cholesky_jittered(&kzz, self.kernel.prior_variance())?;
        self.q_mu = self.prior_mean_at_inducing();
        for d in 0..self.state_dim {
            self.set_chol(d, &lz)?;
        }
        Ok(())
    }

    fn check_inputs(&self, d: usize, xs: &DMatrix<f64>) -> Result<()> {
        if d >= self.state_dim {
            return Err(Error::Input(format!("output dimension {d} out of range")));
        }
        if xs.ncols() != self.state_dim + self.action_dim {
            return Err(Error::Dimension(format!(
                "probe inputs have {} columns, expected {}",
                xs.ncols(),
                self.state_dim + self.action_dim
            )));
        }
        Ok(())
    }

    fn factor(&self) -> Result<DMatrix<f64>> {
        let kzz = self.kernel.gram(&self.z, 0.0)?;
        Ok(cholesky_jittered(&kzz, self.kernel.prior_variance())?.0)
    }

    /// `μ_d(x) = η_d(x) + k(x, Z) K_zz⁻¹ (μ_d − η_d(Z))` for every row of `xs`.
    pub fn posterior_mean(&self, d: usize, xs: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_inputs(d, xs)?;
        Ok(self.predictor()?.predict(xs)?.0.column(d).into_owned())
    }

    /// `v_d(x, x) = k(x,x) − k(x,Z) K_zz⁻¹ [K_zz − Σ_d] K_zz⁻¹ k(Z,x)`,
    /// clamped at zero.
    pub fn posterior_var(&self, d: usize, xs: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_inputs(d, xs)?;
        Ok(self.predictor()?.predict(xs)?.1.column(d).into_owned())
    }

    /// Factorise once for repeated predictions.
    pub fn predictor(&self) -> Result<Predictor<'_>> {
        let lz = self.factor()?;
        let resid = &self.q_mu - self.prior_mean_at_inducing();
        let alpha = solve_spd(&lz, &resid);
        let chol_t = (0..self.state_dim)
            .map(|d| self.variational(d).chol.transpose())
            .collect();
        Ok(Predictor {
            gp: self,
            lz,
            alpha,
            chol_t,
        })
    }

    /// `Σ_d KL[q(u_d) || N(η_d(Z), K_zz)]`.
    pub fn kl_u(&self) -> Result<f64> {
        let lz = self.factor()?;
        let m = self.num_inducing() as f64;
        let logdet_k: f64 = 2.0 * lz.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let mut kl = 0.0;
        for d in 0..self.state_dim {
            let q = self.variational(d);
            let resid = &q.mu - self.z.column(d);
            let a = lz.solve_lower_triangular(&q.chol).ok_or_else(singular)?;
            let r = lz.solve_lower_triangular(&resid).ok_or_else(singular)?;
            let logdet_s: f64 = 2.0 * q.chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
            kl += 0.5 * (a.norm_squared() + r.norm_squared() - m + logdet_k - logdet_s);
        }
        Ok(kl.max(0.0))
    }
}

/// Cached factorisation for evaluating the posterior at many inputs.
pub struct Predictor<'a> {
    gp: &'a SparseGp,
    lz: DMatrix<f64>,
    alpha: DMatrix<f64>,
    chol_t: Vec<DMatrix<f64>>,
}

impl Predictor<'_> {
    fn check(&self, xs: &DMatrix<f64>) -> Result<()> {
        let want = self.gp.state_dim + self.gp.action_dim;
        if xs.ncols() != want {
            return Err(Error::Dimension(format!(
                "probe inputs have {} columns, expected {want}",
                xs.ncols()
            )));
        }
        Ok(())
    }

    /// Posterior means and marginal variances, both `N×D`.
    pub fn predict(&self, xs: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check(xs)?;
        let d = self.gp.state_dim;
        let kzx = self.gp.kernel.cross(&self.gp.z, xs)?;
        let mean = xs.columns(0, d) + kzx.transpose() * &self.alpha;
        let b = self.lz.solve_lower_triangular(&kzx).ok_or_else(singular)?;
        let w = self.lz.tr_solve_lower_triangular(&b).ok_or_else(singular)?;
        let prior = self.gp.kernel.prior_variance();
        let mut var = DMatrix::zeros(xs.nrows(), d);
        for (k, ct) in self.chol_t.iter().enumerate() {
            let cw = ct * &w;
            for i in 0..xs.nrows() {
                let v = prior - b.column(i).norm_squared() + cw.column(i).norm_squared();
                var[(i, k)] = v.max(0.0);
            }
        }
        Ok((mean, var))
    }

    /// Mean of the transition conditioned on inducing values `u` (`M×D`),
    /// `η(x) + k(x, Z) K_zz⁻¹ (u − η(Z))`.
    pub fn conditional_mean(&self, xs: &DMatrix<f64>, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(xs)?;
        let d = self.gp.state_dim;
        if u.shape() != (self.gp.num_inducing(), d) {
            return Err(Error::Dimension("inducing values must be M×D".into()));
        }
        let alpha = solve_spd(&self.lz, &(u - self.gp.prior_mean_at_inducing()));
        let kxz = self.gp.kernel.cross(xs, &self.gp.z)?;
        Ok(xs.columns(0, d) + kxz * alpha)
    }
}

fn singular() -> Error {
    Error::Numerical("singular triangular factor".into())
}

fn solve_spd(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let y = l.solve_lower_triangular(b).expect("factor has positive diagonal");
    l.tr_solve_lower_triangular(&y).expect("factor has positive diagonal")
}

impl Parameterized for SparseGp {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &DMatrix<f64>)) {
        self.kernel.visit_params(&join(prefix, "kernel"), f);
        f(&join(prefix, "inducing"), &self.z);
        f(&join(prefix, "q_mu"), &self.q_mu);
        for (d, c) in self.q_raw_chol.iter().enumerate() {
            f(&join(prefix, &format!("q_chol.{d}")), c);
        }
        f(&join(prefix, "raw_sigma_f2"), &self.raw_sigma_f2);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut DMatrix<f64>)) {
        self.kernel.visit_params_mut(&join(prefix, "kernel"), f);
        f(&join(prefix, "inducing"), &mut self.z);
        f(&join(prefix, "q_mu"), &mut self.q_mu);
        for (d, c) in self.q_raw_chol.iter_mut().enumerate() {
            f(&join(prefix, &format!("q_chol.{d}")), c);
        }
        f(&join(prefix, "raw_sigma_f2"), &mut self.raw_sigma_f2);
    }
}

/// Recorded posterior quantities shared by every episode of one objective
/// evaluation: the factor of `K_zz`, the projected mean residual and the
/// `q(u)` factors.
pub struct GpGraph<'a> {
    gp: &'a SparseGp,
    kernel_vars: Vec<Var>,
    z: Var,
    lz: Var,
    alpha: Var,
    chols: Vec<Var>,
    resid: Var,
    pub sigma_f2: Var,
}

impl<'a> GpGraph<'a> {
    /// Consume the GP's leaves from `cur` (in visit order) and record the
    /// shared factorisation.
    pub fn build(gp: &'a SparseGp, g: &mut Graph, cur: &mut VarCursor) -> Result<Self> {
        let kernel_vars: Vec<Var> = (0..gp.kernel.num_tensors()).map(|_| cur.next()).collect();
        let z = cur.next();
        let q_mu = cur.next();
        let raw_chols: Vec<Var> = (0..gp.state_dim).map(|_| cur.next()).collect();
        let raw_sigma_f2 = cur.next();

        let kzz = gp.kernel.graph_cross(g, &kernel_vars, z, None);
        let prior_var = gp.kernel.graph_prior_variance(g, &kernel_vars);
        let (lz, _) = graph_cholesky_jittered(g, kzz, prior_var)?;
        let eta_z = g.cols(z, 0, gp.state_dim);
        let resid = g.sub(q_mu, eta_z);
        let r = g.solve_lower(lz, resid).map_err(|_| singular())?;
        let alpha = g.solve_lower_t(lz, r).map_err(|_| singular())?;
        let chols = raw_chols.iter().map(|c| g.lower_softplus_diag(*c)).collect();
        let sigma_f2 = g.softplus(raw_sigma_f2);
        Ok(Self {
            gp,
            kernel_vars,
            z,
            lz,
            alpha,
            chols,
            resid: r,
            sigma_f2,
        })
    }

    /// Posterior mean and marginal variance (`N×D` each) at the rows of `xt`.
    pub fn predict(&self, g: &mut Graph, xt: Var) -> Result<(Var, Var)> {
        let d = self.gp.state_dim;
        let kxz = self.gp.kernel.graph_cross(g, &self.kernel_vars, xt, Some(self.z));
        let eta = g.cols(xt, 0, d);
        let corr = g.matmul(kxz, self.alpha);
        let mean = g.add(eta, corr);

        let kzx = g.transpose(kxz);
        let b = g.solve_lower(self.lz, kzx).map_err(|_| singular())?;
        let w = g.solve_lower_t(self.lz, b).map_err(|_| singular())?;
        let kdiag = self.gp.kernel.graph_diag(g, &self.kernel_vars, xt);
        let bb = g.square(b);
        let reduce = g.col_sum(bb);
        let reduce = g.transpose(reduce);
        let qf = g.sub(kdiag, reduce);
        let mut cols = Vec::with_capacity(d);
        for c in &self.chols {
            let ct = g.transpose(*c);
            let cw = g.matmul(ct, w);
            let cw2 = g.square(cw);
            let s = g.col_sum(cw2);
            let s = g.transpose(s);
            cols.push(g.add(qf, s));
        }
        let var = g.hcat(&cols);
        Ok((mean, var))
    }

    /// Recorded `Σ_d KL[q(u_d) || p(u_d)]`.
    pub fn kl(&self, g: &mut Graph) -> Result<Var> {
        let (m, dim) = (self.gp.num_inducing() as f64, self.gp.state_dim as f64);
        let maha = g.sum_sq(self.resid);
        let diag = g.diag(self.lz);
        let logd = g.log(diag);
        let logdet_k = g.sum(logd);
        let logdet_k = g.scale(logdet_k, 2.0 * dim);
        let mut total = g.add(maha, logdet_k);
        for c in &self.chols {
            let a = g.solve_lower(self.lz, *c).map_err(|_| singular())?;
            let tr = g.sum_sq(a);
            let cd = g.diag(*c);
            let lcd = g.log(cd);
            let ls = g.sum(lcd);
            let ls = g.scale(ls, -2.0);
            total = g.add(total, tr);
            total = g.add(total, ls);
        }
        let total = g.offset(total, -m * dim);
        Ok(g.scale(total, 0.5))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::bind;
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_gp(rng: &mut ChaCha8Rng, d: usize, p: usize, m: usize) -> SparseGp {
        let z = DMatrix::from_fn(m, d + p, |_, _| rng.random_range(-2.0..2.0));
        let k = Kernel::sum(vec![
            Kernel::rbf(d + p, 1.2, 0.9).unwrap(),
            Kernel::matern12(d + p, 0.4, 1.5).unwrap(),
        ])
        .unwrap();
        let mut gp = SparseGp::new(k, d, p, z, 0.05, 0.3).unwrap();
        for dd in 0..d {
            let mu = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
            let chol = DMatrix::from_fn(m, m, |i, j| match i.cmp(&j) {
                std::cmp::Ordering::Greater => rng.random_range(-0.3..0.3),
                std::cmp::Ordering::Equal => rng.random_range(0.1..0.8),
                std::cmp::Ordering::Less => 0.0,
            });
            gp.set_variational(dd, &VariationalGaussian { mu, chol }).unwrap();
        }
        gp
    }

    #[test]
    fn prior_mean_when_q_mean_is_prior_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut gp = random_gp(&mut rng, 2, 1, 4);
        gp.reset_to_prior().unwrap();
        let xs = DMatrix::from_fn(6, 3, |_, _| rng.random_range(-3.0..3.0));
        for d in 0..2 {
            let m = gp.posterior_mean(d, &xs).unwrap();
            assert!((m - xs.column(d)).norm() < 1e-10);
            let v = gp.posterior_var(d, &xs).unwrap();
            for i in 0..6 {
                assert!((v[i] - gp.kernel.prior_variance()).abs() < 1e-6);
            }
        }
        assert!(gp.kl_u().unwrap().abs() < 1e-8);
    }

    #[test]
    fn interpolates_inducing_means_at_inducing_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gp = random_gp(&mut rng, 1, 0, 3);
        let z = gp.inducing_inputs().clone();
        let m = gp.posterior_mean(0, &z).unwrap();
        assert!((m - gp.variational(0).mu).norm() < 1e-4);
    }

    #[test]
    fn scalar_kl_by_hand() {
        // D=1, M=1, K_zz≈1, μ−η = 1, Σ = 1 → ½(1 + 1 − 1 − 0) = 0.5
        let k = Kernel::rbf(1, 1.0, 1.0).unwrap();
        let mut gp = SparseGp::new(k, 1, 0, dmatrix![0.0], 0.1, 1.0).unwrap();
        gp.set_variational(
            0,
            &VariationalGaussian {
                mu: DVector::from_vec(vec![1.0]),
                chol: dmatrix![1.0],
            },
        )
        .unwrap();
        assert!((gp.kl_u().unwrap() - 0.5).abs() < 1e-5);
    }

    #[test]
    fn input_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gp = random_gp(&mut rng, 1, 1, 3);
        assert!(gp.posterior_mean(1, &DMatrix::zeros(2, 2)).is_err());
        assert!(gp.posterior_var(0, &DMatrix::zeros(2, 3)).is_err());
        let k = Kernel::rbf(2, 1.0, 1.0).unwrap();
        assert!(SparseGp::new(k.clone(), 1, 0, DMatrix::zeros(3, 2), 0.1, 1.0).is_err());
        assert!(SparseGp::new(k, 1, 1, DMatrix::zeros(0, 2), 0.1, 1.0).is_err());
    }

    #[test]
    fn recorded_predictions_and_kl_match_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gp = random_gp(&mut rng, 2, 1, 5);
        let xs = DMatrix::from_fn(7, 3, |_, _| rng.random_range(-2.0..2.0));
        let mut g = Graph::new();
        let vars = bind(&gp, &mut g);
        let mut cur = VarCursor::new(&vars);
        let gg = GpGraph::build(&gp, &mut g, &mut cur).unwrap();
        assert_eq!(cur.position(), vars.len());
        let x = g.constant(xs.clone());
        let (mean, var) = gg.predict(&mut g, x).unwrap();
        for d in 0..2 {
            let pm = gp.posterior_mean(d, &xs).unwrap();
            let pv = gp.posterior_var(d, &xs).unwrap();
            assert!((g.value(mean).column(d) - pm).norm() < 1e-10);
            assert!((g.value(var).column(d) - pv).norm() < 1e-10);
        }
        let kl = gg.kl(&mut g).unwrap();
        assert!((g.scalar_value(kl) - gp.kl_u().unwrap()).abs() < 1e-10);
        assert!((g.scalar_value(gg.sigma_f2) - 0.05).abs() < 1e-14);
    }
}
