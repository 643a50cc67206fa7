//! Generates a synthetic dataset, writes it to disk, reads it back, and shows
//! how exact counts split over a subimage grid.
//!
//! cargo run --release --example dataset_files -- [out.wcds]

use weakcount::datagen::{generate_dataset, load_dataset, save_dataset, subimage_count_oracle, DatasetSpec};
use weakcount::glc::PartitionGrid;

fn main() -> weakcount::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| std::env::temp_dir().join("scenes.wcds").display().to_string());
    let spec = DatasetSpec {
        num_scenes: 8,
        ..DatasetSpec::default()
    };
    let scenes = generate_dataset(&spec)?;
    save_dataset(&path, &scenes)?;
    let back = load_dataset(&path)?;
    println!("wrote and reread {} scenes via {path}", back.len());

    let grid = PartitionGrid::square(2);
    for (i, s) in back.iter().enumerate() {
        let tiles = subimage_count_oracle(s, grid)?;
        let mass: f64 = s.image.data().iter().sum();
        println!("scene {i}: count {:2}  tiles {tiles:?}  pixel mass {mass:7.2}", s.count);
        assert_eq!(tiles.iter().sum::<usize>(), s.count);
    }
    Ok(())
}
