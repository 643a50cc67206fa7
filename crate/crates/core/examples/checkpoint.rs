//! Trains briefly, saves a checkpoint, reloads it, and resumes training from
//! the stored optimizer state.
//!
//! cargo run --release --example checkpoint

use weakcount::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use weakcount::config::RunConfig;
use weakcount::datagen::{generate_dataset, labeled, DatasetSpec};
use weakcount::glc::{train, train_with_state};

fn main() -> weakcount::Result<()> {
    let run = RunConfig {
        epochs: 2,
        ..RunConfig::default()
    };
    let scenes = generate_dataset(&DatasetSpec {
        num_scenes: 24,
        ..DatasetSpec::default()
    })?;
    let data = labeled(&scenes);
    let config = run.train_config(0);
    let first = train(&config, &data, &[])?;

    let path = std::env::temp_dir().join("weakcount-example.ckpt");
    save_checkpoint(&path, &Checkpoint::from_model(&first.model, &run.digest(), Some(&first.optimizer))?)?;
    let ckpt = load_checkpoint(&path)?;
    let model = ckpt.model()?;
    println!("checkpoint {} holds {} tensors", path.display(), ckpt.tensors.len());
    println!("f_hat = {:?}", model.f_hat().map(|t| t.data()));

    let image = &scenes[0].image;
    let (before, after) = (first.model.predict(image)?, model.predict(image)?);
    println!("prediction before save {before:.6}, after load {after:.6}, identical: {}", before == after);

    let optimizer = ckpt.optimizer(config.adam.clone())?;
    let resumed = train_with_state(&config, model, optimizer, &data, &[])?;
    let last = resumed.history.last().expect("epochs > 0");
    println!("resumed from Adam step {}: L_r {:.3}", first.optimizer.step, last.losses.l_r);
    Ok(())
}
