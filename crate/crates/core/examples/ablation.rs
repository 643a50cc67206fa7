//! Runs the head/loss ablation on a synthetic dataset and prints per-arm MAE.
//!
//! cargo run --release --example ablation -- [epochs] [seeds]

use std::collections::BTreeMap;

use weakcount::config::RunConfig;
use weakcount::datagen::generate_dataset;
use weakcount::eval::ablation_suite;

fn main() -> weakcount::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let config = RunConfig {
        epochs: args.first().copied().unwrap_or(10),
        seeds: (0..args.get(1).copied().unwrap_or(3) as u64).collect(),
        track_consistency: false,
        ..RunConfig::default()
    };
    let scenes = generate_dataset(&config.dataset)?;
    let report = ablation_suite(&config, &scenes)?;

    let mut by_arm: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in &report.records {
        by_arm.entry(&r.arm).or_default().push(r.mae);
        println!("{:28} seed {}  MAE {:7.3}  MSE {:7.3}  gap {:.4}", r.arm, r.seed, r.mae, r.mse, r.consistency_gap);
    }
    println!();
    for (arm, maes) in by_arm {
        println!("{arm:28} mean MAE {:.3}", maes.iter().sum::<f64>() / maes.len() as f64);
    }
    for (arm, seed, err) in &report.failures {
        println!("{arm} seed {seed} failed: {err}");
    }
    Ok(())
}
