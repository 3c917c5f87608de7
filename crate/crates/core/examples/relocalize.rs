//! Builds a keyframe embedding map, persists it, and relocalizes frames that
//! were never used as keyframes, refining the best match with odometry.

use atdn::dataio::{synth_sequence, SyntheticWorld, TrajectorySpec};
use atdn::mapping::{select_keyframes, train_map, KeyframePolicy, MapConfig, MapModel, MapSample, MapTrainConfig};
use atdn::odometry::{VoConfig, VoModel};
use atdn::relocalization::{build_map, load_map, query, save_map, search, CandidatePolicy, Metric, OracleFlow};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let world = SyntheticWorld {
        frames: 240,
        trajectory: TrajectorySpec::Ellipse { semi_x: 10.0, semi_z: 6.0 },
        texture_cell: 2.0,
        ..SyntheticWorld::default()
    };
    let (frames, traj) = synth_sequence(&world, 9)?;
    let ids = select_keyframes(&traj, KeyframePolicy::Stride(3))?;
    let keyframes: Vec<_> = ids.iter().map(|&id| frames[id as usize].clone()).collect();
    let samples: Vec<MapSample> = keyframes
        .iter()
        .map(|f| MapSample { image: f.image.clone(), position: *f.pose.unwrap().translation() })
        .collect();

    let mut model = MapModel::new(MapConfig::default(), 2)?;
    train_map(&mut model, &samples, &MapTrainConfig { epochs: 5, ..MapTrainConfig::default() })?;
    let mut bytes = Vec::new();
    save_map(&build_map(&model, &keyframes)?, &mut bytes)?;
    let map = load_map(&mut bytes.as_slice(), Some(&model.fingerprint()))?;
    println!("map: {} keyframes, {} dims, {} bytes", map.len(), map.dim(), bytes.len());

    // An untrained odometry model still shows the refinement plumbing; see train_vo for a trained one.
    let vo = VoModel::new(VoConfig::default(), 1)?;
    let flows = OracleFlow { world: &world, poses: &traj };
    for q in frames.iter().filter(|f| f.frame_id % 3 != 0).step_by(20) {
        let mut r = query(&map, &model, &q.image, Metric::L2, CandidatePolicy::default())?;
        let nearest = r.best_id;
        let refined = search(&map, &vo, &flows, &mut r, q.frame_id)?;
        let err = (refined.pose.translation() - q.pose.unwrap().translation()).norm();
        println!(
            "query {:>3}: nearest keyframe {:>3} (d = {:.3}), {} candidates, refined position error {:.3} m",
            q.frame_id, nearest, r.best_distance, r.candidates.len(), err
        );
    }
    Ok(())
}
