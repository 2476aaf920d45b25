//! A Gauss-Markov trajectory posterior: marginals, entropy and a check of
//! the sample covariance against the analytic joint covariance.
//!
//! cargo run --release --example gauss_markov

use gpssm::state_posterior::GaussMarkov;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> gpssm::error::Result<()> {
    let t = 5;
    let q = GaussMarkov::new(
        DVector::from_element(1, 1.0),
        DMatrix::from_element(1, 1, 0.3),
        vec![DMatrix::from_element(1, 1, 0.9); t],
        vec![DMatrix::from_element(1, 1, 0.2); t],
    )?;
    for (i, (m, s)) in q.marginals().iter().enumerate() {
        println!("t={i}: mean {:.4}, var {:.4}", m[0], s[(0, 0)]);
    }
    println!("entropy {:.6}", q.entropy()?);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 200_000;
    let mut acc = DMatrix::zeros(t + 1, t + 1);
    let mean: Vec<f64> = q.marginals().iter().map(|(m, _)| m[0]).collect();
    for _ in 0..n {
        let eps = DMatrix::from_fn(t + 1, 1, |_, _| StandardNormal.sample(&mut rng));
        let x = q.sample_trajectory(&eps)?;
        let dev = DVector::from_fn(t + 1, |i, _| x[i] - mean[i]);
        acc += &dev * dev.transpose();
    }
    let worst = (acc / n as f64 - q.joint_covariance()?).amax();
    println!("largest covariance deviation over {n} samples: {worst:.2e}");
    Ok(())
}
