//! Learn cart-pole dynamics from a handful of excited episodes and score
//! free simulations of held-out episodes by the pendulum tip error.
//!
//! cargo run --release --example cartpole_identification -- [steps] [episodes]

use gpssm::config::{Config, EmissionMode};
use gpssm::data::{cartpole_simulate, CartPoleConfig};
use gpssm::optim::{train, TrainOutput};
use gpssm::rollout::{free_simulate, tip_error, InitialState, RolloutOptions};

fn main() -> gpssm::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let episodes: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(8);

    let sim = CartPoleConfig::default();
    let train_ds = cartpole_simulate(&sim, episodes, 30, 0)?;
    let test_ds = cartpole_simulate(&sim, 4, 30, 1)?;

    let mut cfg = Config::default();
    cfg.model.state_dim = 4;
    cfg.model.num_inducing = 50;
    cfg.model.emission = EmissionMode::Fixed;
    cfg.recognition.hidden = 32;
    cfg.training.steps = steps;
    cfg.training.batch_size = episodes;
    cfg.training.learning_rate = 3e-3;
    cfg.training.clip_grad_norm = Some(100.0);
    cfg.training.log_every = 250;
    let mut model = cfg.build_model(&train_ds)?;
    train(&mut model, &train_ds, &cfg.train_options(), &TrainOutput::default(), None)?;

    let opts = RolloutOptions::default();
    let mut total = 0.0;
    for (i, ep) in test_ds.episodes.iter().enumerate() {
        let res = free_simulate(&model, &InitialState::Prefix(ep.prefix(5)), &ep.a, &opts)?;
        let err = tip_error(&res.observations, &ep.y, 0, 2, sim.physics.pole_length)?;
        println!("held-out episode {i}: tip error {err:.3} pole lengths");
        total += err;
    }
    println!("mean tip error {:.3}", total / test_ds.len() as f64);
    Ok(())
}
