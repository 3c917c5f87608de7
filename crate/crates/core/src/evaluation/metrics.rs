//! KITTI odometry errors: for every start frame and every path length `L`,
//! compare the ground-truth and estimated motion to the first frame at least
//! `L` metres further along the ground-truth path.

use super::EvalError;
use crate::geometry::{self, Pose, Trajectory};

/// Lengths of the official protocol, metres.
pub const KITTI_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

#[derive(Debug, Clone, PartialEq)]
pub struct LengthError {
    pub length: f64,
    /// Percent.
    pub translation: f64,
    /// Degrees per metre.
    pub rotation: f64,
    pub subsequences: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricResult {
    /// Mean over all subsequences, percent. Zero when there are none.
    pub translation_error: f64,
    /// Mean over all subsequences, degrees per metre.
    pub rotation_error: f64,
    /// Lengths with at least one subsequence, in configured order.
    pub per_length: Vec<LengthError>,
    pub subsequences: usize,
}

impl MetricResult {
    /// True when the trajectory was shorter than every configured length.
    pub fn is_empty(&self) -> bool {
        self.subsequences == 0
    }
}

/// Raw error of one subsequence: (translation, rotation) per metre in metres/radians.
pub fn segment_error(gt_a: &Pose, gt_b: &Pose, est_a: &Pose, est_b: &Pose, length: f64) -> (f64, f64) {
    let rel_gt = geometry::relative(gt_a, gt_b);
    let rel_est = geometry::relative(est_a, est_b);
    if rel_gt == rel_est {
        return (0.0, 0.0);
    }
    let e = geometry::compose(&geometry::inverse(&rel_est), &rel_gt);
    (
        e.translation().norm() / length,
        geometry::rotation_angle(e.rotation()) / length,
    )
}

/// Cumulative ground-truth path length at each pose.
pub fn path_distances(poses: &[&Pose]) -> Vec<f64> {
    let mut out = Vec::with_capacity(poses.len());
    let mut acc = 0.0;
    for (i, p) in poses.iter().enumerate() {
        if i > 0 {
            acc += (p.translation() - poses[i - 1].translation()).norm();
        }
        out.push(acc);
    }
    out
}

/// KITTI translation (%) and rotation (deg/m) errors over frames common to both trajectories.
pub fn kitti_errors(gt: &Trajectory, est: &Trajectory, lengths: &[f64]) -> Result<MetricResult, EvalError> {
    if lengths.is_empty() || lengths.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
        return Err(EvalError::InvalidLengths);
    }
    let common = gt.common_frames(est);
    if common.is_empty() {
        return Err(EvalError::NoCommonFrames);
    }
    let gt_poses: Vec<&Pose> = common.iter().map(|c| c.1).collect();
    let est_poses: Vec<&Pose> = common.iter().map(|c| c.2).collect();
    let dist = path_distances(&gt_poses);
    let mut sums = vec![(0.0f64, 0.0f64, 0usize); lengths.len()];
    for i in 0..gt_poses.len() {
        for (k, &len) in lengths.iter().enumerate() {
            let target = dist[i] + len;
            let j = i + dist[i..].partition_point(|&d| d < target);
            if j >= gt_poses.len() {
                continue;
            }
            let (t, r) = segment_error(gt_poses[i], gt_poses[j], est_poses[i], est_poses[j], len);
            sums[k].0 += t;
            sums[k].1 += r;
            sums[k].2 += 1;
        }
    }
    Ok(summarize(lengths, &sums))
}

/// Turns per-length `(Σ t, Σ r, count)` into a [`MetricResult`].
pub fn summarize(lengths: &[f64], sums: &[(f64, f64, usize)]) -> MetricResult {
    let deg = 180.0 / std::f64::consts::PI;
    let (mut t, mut r, mut n) = (0.0, 0.0, 0);
    let mut per_length = Vec::new();
    for (&len, &(st, sr, c)) in lengths.iter().zip(sums) {
        t += st;
        r += sr;
        n += c;
        if c > 0 {
            per_length.push(LengthError {
                length: len,
                translation: 100.0 * st / c as f64,
                rotation: deg * sr / c as f64,
                subsequences: c,
            });
        }
    }
    let (translation_error, rotation_error) = if n == 0 {
        (0.0, 0.0)
    } else {
        (100.0 * t / n as f64, deg * r / n as f64)
    };
    MetricResult {
        translation_error,
        rotation_error,
        per_length,
        subsequences: n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn line(n: usize, step: f64) -> Trajectory {
        Trajectory::from_poses(
            (0..n)
                .map(|k| Pose::from_translation(Vector3::new(0.0, 0.0, step * k as f64)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_is_exactly_zero() {
        let gt = line(50, 1.0);
        let r = kitti_errors(&gt, &gt, &[10.0, 20.0]).unwrap();
        assert_eq!((r.translation_error, r.rotation_error), (0.0, 0.0));
        assert_eq!(r.subsequences, 40 + 30);
    }

    #[test]
    fn short_trajectory_is_flagged() {
        let gt = line(5, 1.0);
        let r = kitti_errors(&gt, &gt, &[100.0]).unwrap();
        assert!(r.is_empty());
        assert!(r.per_length.is_empty());
    }

    #[test]
    fn uniform_overshoot() {
        let gt = line(40, 1.0);
        let est = line(40, 1.01);
        let r = kitti_errors(&gt, &est, &[5.0, 10.0]).unwrap();
        assert!((r.translation_error - 1.0).abs() < 1e-9);
    }
}
