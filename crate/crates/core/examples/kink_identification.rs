//! Learn the one-dimensional kink system from noisy episodes and compare
//! the learned transition mean against the true map.
//!
//! cargo run --release --example kink_identification -- [steps] [rbf|sum]

use gpssm::config::{Config, EmissionMode, KernelSpec};
use gpssm::data::{kink_f, kink_generate};
use gpssm::optim::{train, TrainOutput};
use gpssm::rollout::{regular_grid, transition_grid};

fn main() -> gpssm::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(5000);
    let kernel = args.next().unwrap_or_else(|| "sum".into());

    let ds = kink_generate(200, 10, 0.01, 0.1, 7)?;
    let mut cfg = Config::default();
    cfg.model.emission = EmissionMode::Fixed;
    cfg.model.num_inducing = 20;
    cfg.recognition.hidden = 20;
    cfg.training.steps = steps;
    cfg.training.learning_rate = 1e-3;
    cfg.training.log_every = 500;
    // the observation noise is known for this system
    cfg.training.freeze = vec!["emission.raw_sigma_g2".into()];
    let rbf = KernelSpec::Rbf {
        variance: 1.0,
        lengthscale: 10.0,
        ard: false,
    };
    cfg.model.kernel = if kernel == "rbf" {
        rbf
    } else {
        KernelSpec::Sum {
            components: vec![
                rbf,
                KernelSpec::Matern12 {
                    variance: 1.0,
                    lengthscale: 0.1,
                    ard: false,
                },
            ],
        }
    };
    let mut model = cfg.build_model(&ds)?;
    let report = train(&mut model, &ds, &cfg.train_options(), &TrainOutput::default(), None)?;
    if let Some(last) = report.metrics.last() {
        println!("final ELBO {:.3} after {} steps", last.elbo.total, last.step);
    }

    let grid = regular_grid(&[(0.5, 5.5)], &[101])?;
    let rows = transition_grid(&model, &grid)?;
    let (mut sq, mut sq_kink, mut n_kink) = (0.0, 0.0, 0);
    for r in rows.iter().filter(|r| r.kind == "probe") {
        let e = (r.mean - kink_f(r.input[0])).powi(2);
        sq += e;
        if (3.8..=4.2).contains(&r.input[0]) {
            sq_kink += e;
            n_kink += 1;
        }
    }
    println!("RMSE on [0.5, 5.5]: {:.4}", (sq / 101.0).sqrt());
    println!("RMSE on [3.8, 4.2]: {:.4}", (sq_kink / n_kink as f64).sqrt());
    println!("σ_f² = {:.4}, σ_g² = {:.4}", model.gp.sigma_f2(), model.emission.sigma_g2());
    Ok(())
}
