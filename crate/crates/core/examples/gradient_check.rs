//! Compare the reverse-mode gradient of the objective with central finite
//! differences on a small random model.
//!
//! cargo run --release --example gradient_check

use gpssm::config::Config;
use gpssm::data::kink_generate;
use gpssm::elbo::{draw_noise, elbo_with_noise};
use gpssm::optim::elbo_gradient;
use gpssm::params::ParamSet;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> gpssm::error::Result<()> {
    let ds = kink_generate(4, 5, 0.01, 0.1, 0)?;
    let mut cfg = Config::default();
    cfg.model.num_inducing = 4;
    cfg.recognition.hidden = 3;
    let model = cfg.build_model(&ds)?;
    let batch: Vec<_> = ds.episodes.iter().take(2).collect();
    let noise = draw_noise(&batch, 1, 2, &mut ChaCha8Rng::seed_from_u64(3));
    let (_, grads) = elbo_gradient(&model, &batch, &noise, ds.len())?;

    let base = ParamSet::from_model(&model);
    let h = 1e-5;
    let mut worst: (f64, String, f64, f64) = (0.0, String::new(), 0.0, 0.0);
    for (name, g) in grads.iter() {
        for i in 0..g.len() {
            let eval = |delta: f64| -> gpssm::error::Result<f64> {
                let mut p = base.clone();
                p.get_mut(name).expect("same names")[i] += delta;
                let mut m = model.clone();
                p.apply_to(&mut m)?;
                Ok(elbo_with_noise(&m, &batch, &noise, ds.len())?.total)
            };
            let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
            if err > worst.0 {
                worst = (err, format!("{name}[{i}]"), g[i], fd);
            }
        }
    }
    println!(
        "{} parameters, worst relative error {:.2e} at {} (analytic {:.6e}, numeric {:.6e})",
        base.num_scalars(),
        worst.0,
        worst.1,
        worst.2,
        worst.3
    );
    Ok(())
}
