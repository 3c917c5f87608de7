//! Trains the odometry network on oracle flow from a synthetic loop with a
//! shortened curriculum, then integrates its predictions and scores them.

use atdn::dataio::{flow_oracle, SyntheticWorld, TrajectorySpec};
use atdn::evaluation::kitti_errors;
use atdn::geometry::relative;
use atdn::odometry::{integrate, train_vo_with, CurriculumPlan, VoConfig, VoModel, VoSample};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let world = SyntheticWorld {
        frames: 200,
        trajectory: TrajectorySpec::Ellipse { semi_x: 12.0, semi_z: 8.0 },
        ..SyntheticWorld::default()
    };
    let traj = world.trajectory()?;
    let poses: Vec<_> = traj.poses().copied().collect();
    let samples = poses
        .windows(2)
        .map(|w| {
            Ok(VoSample {
                flow: flow_oracle(&world, &w[0], &w[1])?,
                gt: relative(&w[0], &w[1]),
            })
        })
        .collect::<Result<Vec<_>, atdn::dataio::DataError>>()?;

    let mut plan = CurriculumPlan::default();
    for stage in &mut plan.stages {
        stage.epochs = stage.epochs.div_ceil(2);
    }
    let mut model = VoModel::new(VoConfig::default(), 7)?;
    train_vo_with(&mut model, std::slice::from_ref(&samples), &plan, 7, &mut |e| {
        println!("stage {} epoch {:>2}: loss {:.5} lr {:.2e}", e.stage, e.epoch, e.loss, e.lr)
    })?;

    let flows: Vec<_> = samples.iter().map(|s| s.flow.clone()).collect();
    let est = integrate(&model.predict_batch(&flows)?, poses[0]);
    let r = kitti_errors(&traj, &est, &[10.0, 20.0, 30.0, 40.0])?;
    println!("translation {:.3}%  rotation {:.5} deg/m over {} subsequences", r.translation_error, r.rotation_error, r.subsequences);
    Ok(())
}
