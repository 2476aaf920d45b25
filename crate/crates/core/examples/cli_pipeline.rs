//! The command pipeline driven from a configuration file: generate data,
//! train, evaluate the final checkpoint and export the transition grid.
//! Dotted overrides may follow the path.
//!
//! cargo run --release --example cli_pipeline -- configs/kink.toml --training.steps=500

use gpssm::cli::{cmd_eval, cmd_export, cmd_generate, cmd_train, split_overrides};
use gpssm::config::{Config, Metric};
use std::path::PathBuf;

fn main() -> gpssm::error::Result<()> {
    let (rest, overrides) = split_overrides(std::env::args().skip(1))?;
    let path = rest
        .first()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/kink.toml")));
    let cfg = Config::load(&path, &overrides)?;

    let generated = cmd_generate(&cfg)?;
    println!("data in {}", generated.dir.display());
    let run = cmd_train(&cfg, None)?;
    match run.final_elbo {
        Some(elbo) => println!("trained {} steps, final ELBO {elbo:.3}", run.steps),
        None => println!("no training steps run"),
    }
    let ckpt = run.final_checkpoint.expect("training writes checkpoints");
    let ev = cmd_eval(&cfg, &ckpt)?;
    let metric = match ev.metric {
        Metric::Tip => "mean tip error",
        Metric::Rmse => "mean RMSE",
    };
    println!("{metric} on held-out episodes: {:.4}", ev.mean);
    let ex = cmd_export(&cfg, &ckpt)?;
    println!("transition grid in {}", ex.csv.display());
    Ok(())
}
