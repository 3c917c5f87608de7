//! Scores a drifting estimate against ground truth and writes the plot files.

use std::fs::File;

use atdn::evaluation::{emit_axes_csv, emit_distance_profile, emit_xz_svg, kitti_errors, DEFAULT_BINS};
use atdn::geometry::{Pose, Trajectory};
use nalgebra::Vector3;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let n = 600;
    let gt: Vec<Pose> = (0..n)
        .map(|k| {
            let a = k as f64 / n as f64 * std::f64::consts::TAU;
            Pose::yaw(-a, Vector3::new(60.0 * (1.0 - a.cos()), 0.0, 60.0 * a.sin()))
        })
        .collect();
    // Estimate overshoots every step by 2% and yaws 0.002 deg per frame too far.
    let mut est = vec![gt[0]];
    for w in gt.windows(2) {
        let rel = atdn::geometry::relative(&w[0], &w[1]);
        let t = rel.translation() * 1.02;
        let bent = Pose::yaw(0.002f64.to_radians(), Vector3::zeros()).compose(&Pose::new(*rel.rotation(), t)?);
        est.push(est.last().unwrap().compose(&bent));
    }
    let (gt, est) = (Trajectory::from_poses(gt)?, Trajectory::from_poses(est)?);
    let r = kitti_errors(&gt, &est, &[50.0, 100.0, 150.0, 200.0])?;
    println!("translation {:.3}%  rotation {:.5} deg/m", r.translation_error, r.rotation_error);
    for l in &r.per_length {
        println!("  {:>5} m: {:.3}% {:.5} deg/m ({} subsequences)", l.length, l.translation, l.rotation, l.subsequences);
    }

    let dir = std::env::temp_dir().join("atdn-evaluate");
    std::fs::create_dir_all(&dir)?;
    emit_axes_csv(&gt, &est, &mut File::create(dir.join("axes.csv"))?)?;
    emit_xz_svg(&gt, &est, &mut File::create(dir.join("xz.svg"))?)?;
    let ids: Vec<u64> = (0..50).collect();
    let distances: Vec<f64> = ids.iter().map(|&i| ((i as f64 - 20.0) / 6.0).abs() + 0.1).collect();
    emit_distance_profile(
        &ids,
        &distances,
        DEFAULT_BINS,
        &mut File::create(dir.join("profile.csv"))?,
        &mut File::create(dir.join("hist.csv"))?,
    )?;
    println!("plots written to {}", dir.display());
    Ok(())
}
