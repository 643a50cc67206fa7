//! Compares weak image-level training with training on exactly labeled
//! patches, where whole images are predicted as the sum over patches.
//!
//! cargo run --release --example patch_labels -- [epochs] [seed]

use weakcount::config::RunConfig;
use weakcount::datagen::generate_dataset;
use weakcount::eval::{run_arm, split_scenes};

fn main() -> weakcount::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let seed = args.get(1).copied().unwrap_or(0) as u64;
    let weak = RunConfig {
        epochs: args.first().copied().unwrap_or(10),
        track_consistency: false,
        ..RunConfig::default()
    };
    let patches = RunConfig {
        patch_label_mode: true,
        ..weak.clone()
    };
    let scenes = generate_dataset(&weak.dataset)?;
    let (train, test) = split_scenes(&weak, &scenes)?;
    for (label, config) in [("image labels", &weak), ("2x3 patch labels", &patches)] {
        let r = run_arm(label, config, train, test, seed)?;
        println!("{label:18} MAE {:7.3}  MSE {:7.3}", r.record.mae, r.record.mse);
    }
    Ok(())
}
