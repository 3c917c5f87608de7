//! Frame embeddings for the learned map: a convolutional autoencoder with a
//! switchable variational bottleneck, trained with reconstruction, KL and the
//! embedding distance loss.

mod loss;
mod model;
mod train;

use thiserror::Error;

use crate::dataio::DataError;
use crate::geometry::{self, Trajectory};
use crate::tensor::{CheckpointError, TensorError};

pub use loss::{edl, edl_var, kl_var, map_loss, MapLoss, MapLossWeights, EDL_EPS};
pub use model::{MapConfig, MapForward, MapModel};
pub use train::{train_map, train_map_with, MapEpochLog, MapSample, MapTrainConfig};

#[derive(Debug, Error)]
pub enum MappingError {
    #[error("image is {actual:?}, model expects {expected}x{expected}")]
    DimensionMismatch {
        expected: usize,
        actual: (usize, usize),
    },
    #[error("need at least {needed} items, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("embeddings and positions are misaligned ({embeddings} vs {positions})")]
    Misaligned { embeddings: usize, positions: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training aborted after {faults} non-finite steps (epoch {epoch})")]
    FaultLimit { faults: u64, epoch: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Bottleneck output for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub frame_id: u64,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KeyframePolicy {
    /// Every `k`-th frame, starting with the first.
    Stride(usize),
    /// A new keyframe once the camera has moved `distance` metres or turned
    /// `angle` radians away from the previous keyframe.
    Motion { distance: f64, angle: f64 },
}

/// Frame ids selected as keyframes; the first frame is always included.
pub fn select_keyframes(traj: &Trajectory, policy: KeyframePolicy) -> Result<Vec<u64>, MappingError> {
    let entries = traj.entries();
    match policy {
        KeyframePolicy::Stride(k) => {
            if k == 0 {
                return Err(MappingError::InvalidConfig("keyframe stride must be positive".into()));
            }
            Ok(entries.iter().step_by(k).map(|(id, _)| *id).collect())
        }
        KeyframePolicy::Motion { distance, angle } => {
            if !(distance > 0.0 && angle > 0.0) {
                return Err(MappingError::InvalidConfig(
                    "keyframe motion thresholds must be positive".into(),
                ));
            }
            let mut out = vec![entries[0].0];
            let mut last = entries[0].1;
            for (id, pose) in &entries[1..] {
                let moved = (pose.translation() - last.translation()).norm();
                let turned = geometry::rotation_angle(geometry::relative(&last, pose).rotation());
                if moved >= distance || turned >= angle {
                    out.push(*id);
                    last = *pose;
                }
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;
    use nalgebra::Vector3;

    fn line(n: usize, step: f64) -> Trajectory {
        Trajectory::from_poses(
            (0..n)
                .map(|k| Pose::from_translation(Vector3::new(step * k as f64, 0.0, 0.0)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn stride_policies() {
        let t = line(11, 1.0);
        assert_eq!(select_keyframes(&t, KeyframePolicy::Stride(1)).unwrap().len(), 11);
        assert_eq!(select_keyframes(&t, KeyframePolicy::Stride(5)).unwrap(), vec![0, 5, 10]);
        assert!(select_keyframes(&t, KeyframePolicy::Stride(0)).is_err());
    }

    #[test]
    fn motion_policy_by_rotation() {
        let t = Trajectory::from_poses((0..10).map(|k| Pose::yaw(0.1 * k as f64, Vector3::zeros())).collect())
            .unwrap();
        let ids = select_keyframes(
            &t,
            KeyframePolicy::Motion {
                distance: 1.0,
                angle: 0.25,
            },
        )
        .unwrap();
        assert_eq!(ids, vec![0, 3, 6, 9]);
    }
}
