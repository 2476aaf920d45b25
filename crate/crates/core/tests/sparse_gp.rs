mod common;

use common::rng;
use gpssm::kernels::Kernel;
use gpssm::sparse_gp::{SparseGp, VariationalGaussian};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_gp(r: &mut ChaCha8Rng, m: usize, d: usize, p: usize) -> SparseGp {
    let z = DMatrix::from_fn(m, d + p, |i, _| i as f64 * 1.3 - 1.0 + r.random_range(-0.3..0.3));
    let kernel = Kernel::sum(vec![
        Kernel::rbf(d + p, r.random_range(0.5..1.5), r.random_range(0.6..1.5)).unwrap(),
        Kernel::matern12(d + p, r.random_range(0.1..0.5), r.random_range(0.5..2.0)).unwrap(),
    ])
    .unwrap();
    let mut gp = SparseGp::new(kernel, d, p, z, 0.1, 0.5).unwrap();
    for k in 0..d {
        let q = VariationalGaussian {
            mu: DVector::from_fn(m, |_, _| r.random_range(-1.0..1.0)),
            chol: DMatrix::from_fn(m, m, |i, j| match i.cmp(&j) {
                std::cmp::Ordering::Greater => r.random_range(-0.3..0.3),
                std::cmp::Ordering::Equal => r.random_range(0.2..0.8),
                std::cmp::Ordering::Less => 0.0,
            }),
        };
        gp.set_variational(k, &q).unwrap();
    }
    gp
}

/// `K_zz` with the first jitter level, inverted by LU rather than Cholesky.
fn dense_inverse(gp: &SparseGp) -> DMatrix<f64> {
    let z = gp.inducing_inputs();
    let mut k = gp.kernel.gram(z, 0.0).unwrap();
    let jitter = 1e-6 * gp.kernel.prior_variance();
    for i in 0..k.nrows() {
        k[(i, i)] += jitter;
    }
    k.lu().try_inverse().unwrap()
}

fn probes(r: &mut ChaCha8Rng, n: usize, dim: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, dim, |_, _| r.random_range(-2.0..3.0))
}

#[test]
fn posterior_mean_matches_dense_solve() {
    let mut r = rng(1);
    for &(m, d, p) in &[(2, 1, 0), (2, 2, 1), (5, 1, 1)] {
        let gp = random_gp(&mut r, m, d, p);
        let kinv = dense_inverse(&gp);
        let xs = probes(&mut r, 7, d + p);
        let kxz = gp.kernel.cross(&xs, gp.inducing_inputs()).unwrap();
        for k in 0..d {
            let q = gp.variational(k);
            let resid = &q.mu - gp.inducing_inputs().column(k);
            let want = xs.column(k) + &kxz * &kinv * resid;
            let got = gp.posterior_mean(k, &xs).unwrap();
            assert!((got - want).amax() < 1e-10);
        }
    }
}

#[test]
fn posterior_variance_matches_dense_formula() {
    let mut r = rng(2);
    for _ in 0..5 {
        let gp = random_gp(&mut r, 3, 1, 1);
        let kinv = dense_inverse(&gp);
        let z = gp.inducing_inputs();
        let mut kzz = gp.kernel.gram(z, 0.0).unwrap();
        for i in 0..3 {
            kzz[(i, i)] += 1e-6 * gp.kernel.prior_variance();
        }
        let xs = probes(&mut r, 6, 2);
        let kxz = gp.kernel.cross(&xs, z).unwrap();
        let s = gp.variational(0).covariance();
        let got = gp.posterior_var(0, &xs).unwrap();
        for i in 0..6 {
            let k = kxz.row(i).transpose();
            let want = gp.kernel.eval(&[xs[(i, 0)], xs[(i, 1)]], &[xs[(i, 0)], xs[(i, 1)]]).unwrap()
                - (k.transpose() * &kinv * (&kzz - &s) * &kinv * &k)[0];
            assert!((got[i] - want.max(0.0)).abs() < 1e-10, "{} vs {want}", got[i]);
        }
    }
}

#[test]
fn prior_posterior_recovers_the_prior_process() {
    let mut r = rng(3);
    let mut gp = random_gp(&mut r, 6, 2, 1);
    gp.reset_to_prior().unwrap();
    let xs = probes(&mut r, 10, 3);
    for k in 0..2 {
        let mean = gp.posterior_mean(k, &xs).unwrap();
        let var = gp.posterior_var(k, &xs).unwrap();
        assert!((mean - xs.column(k)).amax() < 1e-8);
        for v in var.iter() {
            assert!((v - gp.kernel.prior_variance()).abs() < 1e-5);
        }
    }
    assert!(gp.kl_u().unwrap() < 1e-8);
}

#[test]
fn pinned_inducing_values_leave_no_variance_at_the_inducing_inputs() {
    let mut r = rng(4);
    let mut gp = random_gp(&mut r, 4, 1, 0);
    let q = VariationalGaussian {
        mu: gp.variational(0).mu,
        chol: DMatrix::identity(4, 4) * 1e-9,
    };
    gp.set_variational(0, &q).unwrap();
    let z = gp.inducing_inputs().clone();
    let var = gp.posterior_var(0, &z).unwrap();
    assert!(var.amax() < 1e-4, "{var}");
    let mean = gp.posterior_mean(0, &z).unwrap();
    assert!((mean - &q.mu).amax() < 1e-4);
}

#[test]
fn extra_inducing_covariance_raises_the_variance() {
    let mut r = rng(5);
    let mut gp = random_gp(&mut r, 4, 1, 1);
    let xs = probes(&mut r, 12, 2);
    let mut tight = gp.variational(0);
    tight.chol = DMatrix::identity(4, 4) * 1e-6;
    gp.set_variational(0, &tight).unwrap();
    let low = gp.posterior_var(0, &xs).unwrap();
    let mut wide = tight.clone();
    wide.chol = DMatrix::from_fn(4, 4, |i, j| if i >= j { r.random_range(0.1..0.6) } else { 0.0 });
    gp.set_variational(0, &wide).unwrap();
    let high = gp.posterior_var(0, &xs).unwrap();
    for (a, b) in low.iter().zip(high.iter()) {
        assert!(b + 1e-12 >= *a);
    }
}

#[test]
fn prediction_is_independent_of_evaluation_order() {
    // `η + K_xz K_zz⁻¹ (μ − η)` against `K_xz K_zz⁻¹ μ + (η − K_xz K_zz⁻¹ η)`
    let mut r = rng(6);
    let gp = random_gp(&mut r, 5, 1, 0);
    let kinv = dense_inverse(&gp);
    let xs = probes(&mut r, 9, 1);
    let kxz = gp.kernel.cross(&xs, gp.inducing_inputs()).unwrap();
    let proj = &kxz * &kinv;
    let q = gp.variational(0);
    let eta_z = gp.inducing_inputs().column(0).into_owned();
    let split = &proj * &q.mu + (xs.column(0) - &proj * eta_z);
    assert!((gp.posterior_mean(0, &xs).unwrap() - split).amax() < 1e-8);

    let s = q.covariance();
    let kzz = kinv.clone().try_inverse().unwrap();
    let got = gp.posterior_var(0, &xs).unwrap();
    for i in 0..9 {
        let pr = proj.row(i);
        let v = gp.kernel.prior_variance() - (pr * &kzz * pr.transpose())[0] + (pr * &s * pr.transpose())[0];
        assert!((got[i] - v.max(0.0)).abs() < 1e-8);
    }
}

#[test]
fn kl_matches_monte_carlo() {
    let mut r = rng(7);
    let gp = random_gp(&mut r, 3, 1, 0);
    let q = gp.variational(0);
    let z = gp.inducing_inputs();
    let mut kzz = gp.kernel.gram(z, 0.0).unwrap();
    for i in 0..3 {
        kzz[(i, i)] += 1e-6 * gp.kernel.prior_variance();
    }
    let kinv = kzz.clone().try_inverse().unwrap();
    let s = q.covariance();
    let sinv = s.clone().try_inverse().unwrap();
    let (ldk, lds) = (kzz.determinant().ln(), s.determinant().ln());
    let eta = z.column(0).into_owned();
    let n = 1_000_000;
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..n {
        let e = DVector::from_fn(3, |_, _| StandardNormal.sample(&mut r));
        let u = &q.mu + &q.chol * e;
        let dq = &u - &q.mu;
        let dp = &u - &eta;
        let v = -0.5 * (dq.transpose() * &sinv * &dq)[0] - 0.5 * lds + 0.5 * (dp.transpose() * &kinv * &dp)[0]
            + 0.5 * ldk;
        sum += v;
        sq += v * v;
    }
    let mean = sum / n as f64;
    let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
    let kl = gp.kl_u().unwrap();
    assert!((kl - mean).abs() < 3.0 * se, "kl {kl} vs MC {mean} ± {se}");
}

#[test]
fn scalar_kl_example() {
    let kernel = Kernel::rbf(1, 1.0, 1.0).unwrap();
    let mut gp = SparseGp::new(kernel, 1, 0, DMatrix::from_element(1, 1, 0.0), 0.1, 1.0).unwrap();
    gp.set_variational(
        0,
        &VariationalGaussian {
            mu: DVector::from_element(1, 1.0),
            chol: DMatrix::from_element(1, 1, 1.0),
        },
    )
    .unwrap();
    // the first jitter level perturbs K_zz = 1 by 1e-6
    assert!((gp.kl_u().unwrap() - 0.5).abs() < 1e-5);
}
