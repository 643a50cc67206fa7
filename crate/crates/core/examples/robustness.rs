//! Trains under multiplicative label deviation and reports clean test MAE for
//! each sigma.
//!
//! cargo run --release --example robustness -- [epochs] [seeds]

use weakcount::config::RunConfig;
use weakcount::datagen::generate_dataset;
use weakcount::eval::robustness_sweep;

fn main() -> weakcount::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let config = RunConfig {
        epochs: args.first().copied().unwrap_or(10),
        seeds: (0..args.get(1).copied().unwrap_or(2) as u64).collect(),
        track_consistency: false,
        ..RunConfig::default()
    };
    let scenes = generate_dataset(&config.dataset)?;
    let report = robustness_sweep(&config, &scenes, &[0.0, 0.1, 0.2])?;
    for r in &report.records {
        println!("{:10} seed {}  MAE {:7.3}  MSE {:7.3}", r.arm, r.seed, r.mae, r.mse);
    }
    Ok(())
}
