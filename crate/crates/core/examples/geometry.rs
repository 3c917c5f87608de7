//! Pose algebra: composing relative motions, recovering them, and accumulating a path.

use atdn::geometry::{relative, rotation_angle, Pose, Trajectory};
use nalgebra::Vector3;

fn main() {
    let a = Pose::from_axis_angle(Vector3::new(0.0, 0.3, 0.0), Vector3::new(1.0, 0.0, 2.0));
    let b = Pose::from_axis_angle(Vector3::new(0.1, -0.2, 0.05), Vector3::new(4.0, 0.5, 3.0));
    let delta = relative(&a, &b);
    println!("relative rotation {:.4} rad, translation {:.4}", rotation_angle(delta.rotation()), delta.translation().norm());
    println!("round-trip error {:e}", a.compose(&delta).max_abs_diff(&b));

    // Drive a square of side 10 m with 1 m steps and 90 degree turns at the corners.
    let mut poses = vec![Pose::identity()];
    for k in 1..=40 {
        let turn = if k % 10 == 0 { std::f64::consts::FRAC_PI_2 } else { 0.0 };
        let step = Pose::yaw(turn, Vector3::new(0.0, 0.0, 1.0));
        poses.push(poses.last().unwrap().compose(&step));
    }
    let traj = Trajectory::from_poses(poses).unwrap();
    println!("{} poses, loop closure gap {:e} m", traj.len(), traj.last().translation().norm());
}
