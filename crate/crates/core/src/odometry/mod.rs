//! Flow-conditioned visual odometry: a convolutional regressor from a flow
//! field to a relative pose, trained with per-step and windowed composition
//! losses under a curriculum of growing windows.

mod loss;
mod model;
pub mod so3;
mod train;

use nalgebra::Vector3;
use thiserror::Error;

use crate::dataio::{DataError, FlowField};
use crate::geometry::{self, Pose, RelativePose, Trajectory};
use crate::tensor::{CheckpointError, TensorError};

pub use loss::{composition_loss, composition_loss_var, step_loss, step_loss_var, DEFAULT_KAPPA};
pub use model::{VoConfig, VoModel};
pub use train::{
    train_vo, train_vo_step_only, train_vo_with, CurriculumPlan, EpochLog, Stage, TrainReport,
    VoSample,
};

#[derive(Debug, Error)]
pub enum OdometryError {
    #[error("flow is {actual:?} but the model expects a square field divisible to {expected}")]
    DimensionMismatch {
        expected: usize,
        actual: (usize, usize),
    },
    #[error("window {window} exceeds sequence length {len}")]
    WindowTooLarge { window: usize, len: usize },
    #[error("invalid curriculum: {0}")]
    InvalidPlan(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("training aborted after {faults} non-finite steps (stage {stage}, epoch {epoch})")]
    FaultLimit {
        faults: u64,
        stage: usize,
        epoch: usize,
    },
    #[error("no training clips: every sequence is shorter than {clip_len} steps")]
    NoClips { clip_len: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Relative motion between consecutive frames: translation in metres and
/// axis-angle rotation in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseDelta {
    pub translation: Vector3<f64>,
    pub rotation: Vector3<f64>,
}

impl PoseDelta {
    pub fn zero() -> Self {
        Self {
            translation: Vector3::zeros(),
            rotation: Vector3::zeros(),
        }
    }

    /// Wraps the rotation into the principal range `‖r‖ < π`.
    pub fn new(translation: Vector3<f64>, rotation: Vector3<f64>) -> Self {
        let rotation = if rotation.norm() < std::f64::consts::PI {
            rotation
        } else {
            geometry::axis_angle_from_rotation(&geometry::rotation_from_axis_angle(&rotation))
        };
        Self {
            translation,
            rotation,
        }
    }

    pub fn from_pose(p: &RelativePose) -> Self {
        Self {
            translation: *p.translation(),
            rotation: p.axis_angle(),
        }
    }

    pub fn to_pose(&self) -> RelativePose {
        Pose::from_axis_angle(self.rotation, self.translation)
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().chain(self.rotation.iter()).all(|v| v.is_finite())
    }

    /// `[tx, ty, tz, rx, ry, rz]`.
    pub fn to_array(&self) -> [f64; 6] {
        let (t, r) = (&self.translation, &self.rotation);
        [t.x, t.y, t.z, r.x, r.y, r.z]
    }
}

/// Chains `deltas` from `start`; frame ids run from 0 to `deltas.len()`.
pub fn integrate(deltas: &[PoseDelta], start: Pose) -> Trajectory {
    let mut poses = Vec::with_capacity(deltas.len() + 1);
    poses.push(start);
    let mut cur = start;
    for d in deltas {
        cur = geometry::compose(&cur, &d.to_pose());
        poses.push(cur);
    }
    Trajectory::from_poses(poses).expect("non-empty with sequential ids")
}

/// Checks that a flow field can be fed to a model with the given input size.
pub(crate) fn check_flow(flow: &FlowField, size: usize) -> Result<usize, OdometryError> {
    let (h, w) = (flow.height(), flow.width());
    if h != w || h < size || h % size != 0 {
        return Err(OdometryError::DimensionMismatch {
            expected: size,
            actual: (h, w),
        });
    }
    Ok(h / size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrate_empty_and_steps() {
        let start = Pose::yaw(0.3, Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(integrate(&[], start).len(), 1);
        let step = PoseDelta::new(Vector3::x(), Vector3::zeros());
        let t = integrate(&vec![step; 7], Pose::identity());
        assert_eq!(t.len(), 8);
        assert_eq!(t.last().translation().x, 7.0);
    }

    #[test]
    fn delta_round_trip() {
        let p = Pose::from_axis_angle(Vector3::new(0.1, -0.2, 0.3), Vector3::new(1.0, 0.0, 2.0));
        assert!(PoseDelta::from_pose(&p).to_pose().max_abs_diff(&p) < 1e-12);
        let wrapped = PoseDelta::new(Vector3::zeros(), Vector3::new(0.0, 4.0, 0.0));
        assert!(wrapped.rotation.norm() < std::f64::consts::PI);
    }
}
