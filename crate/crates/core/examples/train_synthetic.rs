//! Trains the SFSL counter with the consistency loss on synthetic scenes and
//! reports test error.
//!
//! cargo run --release --example train_synthetic -- [train_scenes] [epochs] [seed]

use std::time::Instant;

use weakcount::datagen::{generate_dataset, labeled, DatasetSpec};
use weakcount::eval::mae_mse;
use weakcount::glc::{train, TrainConfig};

fn main() -> weakcount::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let n_train = args.first().copied().unwrap_or(200);
    let epochs = args.get(1).copied().unwrap_or(20);
    let seed = args.get(2).copied().unwrap_or(0) as u64;

    let scenes = generate_dataset(&DatasetSpec {
        num_scenes: n_train + 50,
        seed,
        ..DatasetSpec::default()
    })?;
    let all = labeled(&scenes);
    let (train_set, test_set) = all.split_at(n_train);
    let config = TrainConfig {
        epochs,
        seed,
        ..TrainConfig::default()
    };

    let start = Instant::now();
    let out = train(&config, train_set, &[])?;
    for e in &out.history.epochs {
        println!("epoch {:3}  L_r {:10.4}  L_c {:10.4}", e.epoch, e.losses.l_r, e.losses.l_c);
    }
    let preds = test_set.iter().map(|(img, _)| out.model.predict(img)).collect::<Result<Vec<_>, _>>()?;
    let counts: Vec<f64> = test_set.iter().map(|s| s.1).collect();
    let (mae, rmse) = mae_mse(&preds, &counts)?;
    println!("test MAE {mae:.3}  MSE {rmse:.3}  ({:.1}s)", start.elapsed().as_secs_f64());
    Ok(())
}
