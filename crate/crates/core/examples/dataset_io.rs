//! Write a simulated dataset, read it back, and import a plain numeric
//! table as episodes.
//!
//! cargo run --release --example dataset_io

use gpssm::data::{cartpole_simulate, import_columns, load_dataset, save_dataset, CartPoleConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("gpssm-dataset-io");
    std::fs::create_dir_all(&dir)?;

    let ds = cartpole_simulate(&CartPoleConfig::default(), 3, 20, 0)?;
    let path = dir.join("cartpole.jsonl");
    save_dataset(&ds, &path)?;
    let back = load_dataset(&path)?;
    println!("{} episodes, O={}, P={}, identical after reload: {}", back.len(), back.obs_dim, back.action_dim, back == ds);

    // position and force columns from a whitespace table
    let table = dir.join("log.txt");
    let mut text = String::from("# position velocity force\n");
    for ep in &ds.episodes {
        for t in 0..ep.len() {
            text += &format!("{} {} {}\n", ep.y[(t, 0)], ep.y[(t, 1)], ep.a[(t, 0)]);
        }
    }
    std::fs::write(&table, text)?;
    let imported = import_columns(&table, &[0], &[2], 10)?;
    println!("imported {} episodes of 10 steps", imported.len());
    Ok(())
}
