//! Trains the mapping autoencoder on keyframes with the embedding distance loss
//! as regulariser, once plain and once with the variational bottleneck.

use atdn::dataio::{synth_sequence, SyntheticWorld, TrajectorySpec};
use atdn::mapping::{select_keyframes, train_map_with, KeyframePolicy, MapConfig, MapModel, MapSample, MapTrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let world = SyntheticWorld {
        frames: 180,
        trajectory: TrajectorySpec::Circle { radius: 7.0 },
        texture_cell: 2.0,
        ..SyntheticWorld::default()
    };
    let (frames, traj) = synth_sequence(&world, 3)?;
    let ids = select_keyframes(&traj, KeyframePolicy::Motion { distance: 0.5, angle: 0.15 })?;
    let samples: Vec<MapSample> = ids
        .iter()
        .map(|&id| {
            let f = &frames[id as usize];
            MapSample {
                image: f.image.clone(),
                position: *f.pose.expect("synthetic frames carry poses").translation(),
            }
        })
        .collect();
    println!("{} keyframes", samples.len());

    for variational in [false, true] {
        let mut model = MapModel::new(MapConfig { variational, ..MapConfig::default() }, 11)?;
        let cfg = MapTrainConfig { epochs: 4, ..MapTrainConfig::default() };
        println!("variational = {variational}");
        train_map_with(&mut model, &samples, &cfg, &mut |e| {
            println!("  epoch {}: recon {:.5} kl {:.4} edl {:.4}", e.epoch, e.recon, e.kl, e.edl)
        })?;
    }
    Ok(())
}
