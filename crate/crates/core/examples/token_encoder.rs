//! Trains the attention-based backbone with the similarity head and shows the
//! per-token probabilities of one scene.
//!
//! cargo run --release --example token_encoder -- [epochs]

use weakcount::backbone::BackboneConfig;
use weakcount::datagen::{generate_dataset, labeled, DatasetSpec};
use weakcount::glc::{train, TrainConfig};
use weakcount::model::{HeadKind, ModelConfig};

fn main() -> weakcount::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(3);
    let scenes = generate_dataset(&DatasetSpec {
        num_scenes: 60,
        ..DatasetSpec::default()
    })?;
    let data = labeled(&scenes);
    let config = TrainConfig {
        model: ModelConfig {
            backbone: BackboneConfig::token_default(),
            head: HeadKind::Sfsl,
            mlp_hidden: vec![128, 64],
        },
        epochs,
        track_consistency: false,
        ..TrainConfig::default()
    };
    let out = train(&config, &data, &[])?;
    for e in &out.history.epochs {
        println!("epoch {}  L_r {:9.3}  L_c {:7.3}", e.epoch, e.losses.l_r, e.losses.l_c);
    }

    let scene = &scenes[0];
    let output = out.model.predict_maps(&scene.image)?;
    println!("true count {}, predicted {:.2}", scene.count, output.count);
    // one probability per 16x16 patch token
    let p = output.probability.expect("similarity head");
    let side = (p.numel() as f64).sqrt() as usize;
    println!("token probabilities:");
    for row in p.data().chunks(side) {
        println!("  {}", row.iter().map(|v| format!("{v:6.3}")).collect::<Vec<_>>().join(" "));
    }
    Ok(())
}
