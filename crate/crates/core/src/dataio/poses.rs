use std::io::{BufRead, Write};

use super::DataError;
use crate::geometry::{self, Pose, Trajectory};

/// Rotations drifting up to this far from orthonormal are repaired on parse.
pub const POSE_RENORMALIZE_TOL: f64 = 1e-6;

/// Reads a KITTI odometry pose file: one row-major 3×4 `[R|t]` per non-empty line.
/// Frame ids count non-empty lines from zero.
pub fn parse_pose_file(reader: impl BufRead) -> Result<Trajectory, DataError> {
    let mut poses = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut values = [0.0f64; 12];
        let mut count = 0;
        for tok in line.split_whitespace() {
            if count == 12 {
                count += 1;
                break;
            }
            values[count] = tok.parse().map_err(|_| DataError::Parse {
                line: lineno,
                reason: format!("not a number: {tok:?}"),
            })?;
            count += 1;
        }
        if count != 12 {
            return Err(DataError::Parse {
                line: lineno,
                reason: format!("expected 12 values, found {}", line.split_whitespace().count()),
            });
        }
        let (r, t) = geometry::split_3x4(&values);
        let pose = Pose::new_renormalized(r, t, POSE_RENORMALIZE_TOL).map_err(|e| match e {
            geometry::GeometryError::NotOrthonormal { drift } => DataError::InvalidRotation {
                line: lineno,
                drift,
            },
            other => DataError::Parse {
                line: lineno,
                reason: other.to_string(),
            },
        })?;
        poses.push(pose);
    }
    Trajectory::from_poses(poses).map_err(|e| DataError::Parse {
        line: 0,
        reason: e.to_string(),
    })
}

/// Writes one line per pose with shortest round-trip decimal formatting.
pub fn write_pose_file(traj: &Trajectory, w: &mut impl Write) -> std::io::Result<()> {
    for pose in traj.poses() {
        let line: Vec<String> = pose.to_row_major_3x4().iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn identity_line() {
        let t = parse_pose_file("1 0 0 0 0 1 0 0 0 0 1 0\n".as_bytes()).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(*t.first(), Pose::identity());
    }

    #[test]
    fn translation_line() {
        let t = parse_pose_file("1 0 0 5 0 1 0 0 0 0 1 -2".as_bytes()).unwrap();
        assert_eq!(*t.first().translation(), Vector3::new(5.0, 0.0, -2.0));
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let err = parse_pose_file("1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 2, .. }), "{err}");
        let err = parse_pose_file("1 0 0 0 0 1 0 x 0 0 1 0".as_bytes()).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 1, .. }));
        let err = parse_pose_file("1 0 0 0 0 1 0 0 0 0 1 0 7".as_bytes()).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 1, .. }));
    }

    #[test]
    fn drifting_rotation_repaired_or_rejected() {
        let ok = parse_pose_file("1 1e-7 0 0 0 1 0 0 0 0 1 0".as_bytes()).unwrap();
        assert!(geometry::rotation_drift(ok.first().rotation()) < 1e-12);
        let err = parse_pose_file("1 1e-3 0 0 0 1 0 0 0 0 1 0".as_bytes()).unwrap_err();
        assert!(matches!(err, DataError::InvalidRotation { line: 1, .. }));
    }
}
