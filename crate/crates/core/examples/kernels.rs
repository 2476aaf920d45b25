//! Build each kernel family, print a few covariances and check that the
//! Gram matrices factorise.
//!
//! cargo run --release --example kernels

use gpssm::kernels::{cholesky_jittered, Kernel, KernelParams, LeafKind, WarpNet};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> gpssm::error::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let kernels = vec![
        ("rbf", Kernel::rbf(2, 1.0, 0.7)?),
        ("rbf ard", Kernel::leaf(LeafKind::Rbf, 2, KernelParams::new(1.0, 0.7, Some(2))?)?),
        ("matern12", Kernel::matern12(2, 1.0, 0.7)?),
        ("arc-cosine", Kernel::arc_cosine0(2, 1.0)?),
        ("rbf + matern12", Kernel::sum(vec![Kernel::rbf(2, 1.0, 10.0)?, Kernel::matern12(2, 1.0, 0.1)?])?),
        ("warped matern12", Kernel::warped(WarpNet::new(2, &[8, 2], &mut rng)?, Kernel::matern12(2, 1.0, 1.0)?)?),
    ];
    let x = DMatrix::from_row_slice(4, 2, &[0.1, -0.3, 0.5, 0.0, 1.0, 1.0, -2.0, 0.5]);
    for (name, k) in &kernels {
        let g = k.gram(&x, 0.0)?;
        let (_, jitter) = cholesky_jittered(&g, k.prior_variance())?;
        println!("{name:>16}: k(x0,x1) = {:.4}, k(x0,x3) = {:.4}, jitter {jitter:.0e}", g[(0, 1)], g[(0, 3)]);
    }
    Ok(())
}
