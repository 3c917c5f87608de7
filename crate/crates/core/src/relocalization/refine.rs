use std::collections::HashMap;

use super::{EmbeddingMap, RelocError, RelocResult};
use crate::dataio::{flow_oracle, FlowField, SyntheticWorld};
use crate::geometry::{Pose, RelativePose, Trajectory};
use crate::odometry::VoModel;

/// Supplies the flow between two frames of the sequence, `from` to `to`.
pub trait FlowSource {
    fn flow(&self, from: u64, to: u64) -> Result<FlowField, RelocError>;
}

fn unavailable(from: u64, to: u64) -> RelocError {
    RelocError::FlowUnavailable { from, to }
}

/// Exact ground-plane flow from the synthetic world and known poses.
pub struct OracleFlow<'a> {
    pub world: &'a SyntheticWorld,
    pub poses: &'a Trajectory,
}

impl FlowSource for OracleFlow<'_> {
    fn flow(&self, from: u64, to: u64) -> Result<FlowField, RelocError> {
        let pose = |id| self.poses.pose_of(id).ok_or_else(|| unavailable(from, to));
        Ok(flow_oracle(self.world, pose(from)?, pose(to)?)?)
    }
}

/// Precomputed fields keyed by `(from, to)`.
#[derive(Debug, Clone, Default)]
pub struct StoredFlows(pub HashMap<(u64, u64), FlowField>);

impl FlowSource for StoredFlows {
    fn flow(&self, from: u64, to: u64) -> Result<FlowField, RelocError> {
        self.0.get(&(from, to)).cloned().ok_or_else(|| unavailable(from, to))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Refinement {
    pub index: usize,
    /// Predicted motion from the keyframe to the query.
    pub delta: RelativePose,
    /// Keyframe pose composed with `delta`.
    pub pose: Pose,
}

/// Step three: odometry between the keyframe at `index` and the query frame.
/// Flow is always taken forward in time, matching how the odometry network
/// was trained; a keyframe recorded after the query gets the inverted motion.
pub fn refine(
    map: &EmbeddingMap,
    vo: &VoModel,
    source: &dyn FlowSource,
    index: usize,
    query_id: u64,
) -> Result<Refinement, RelocError> {
    let record = map.records().get(index).ok_or(RelocError::EmptyMap)?;
    let delta = if query_id >= record.frame_id {
        vo.predict_delta(&source.flow(record.frame_id, query_id)?)?.to_pose()
    } else {
        vo.predict_delta(&source.flow(query_id, record.frame_id)?)?.to_pose().inverse()
    };
    Ok(Refinement {
        index,
        delta,
        pose: record.pose.compose(&delta),
    })
}

/// Refines every candidate and keeps the one whose predicted translation is
/// smallest. Updates `result` with the chosen keyframe and motion.
pub fn search(
    map: &EmbeddingMap,
    vo: &VoModel,
    source: &dyn FlowSource,
    result: &mut RelocResult,
    query_id: u64,
) -> Result<Refinement, RelocError> {
    let mut best: Option<Refinement> = None;
    for &index in &result.candidates {
        let r = refine(map, vo, source, index, query_id)?;
        if best.is_none_or(|b| r.delta.translation().norm() < b.delta.translation().norm()) {
            best = Some(r);
        }
    }
    let best = best.ok_or(RelocError::EmptyMap)?;
    result.best_index = best.index;
    result.best_id = map.records()[best.index].frame_id;
    result.best_distance = result.profile[best.index];
    result.refined = Some(best.delta);
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::odometry::VoConfig;
    use crate::relocalization::{query_embedding, CandidatePolicy, KeyframeRecord, Metric};
    use nalgebra::Vector3;

    #[test]
    fn exact_delta_reproduces_pose() {
        let kf = Pose::yaw(0.3, Vector3::new(1.0, 0.0, 2.0));
        let q = Pose::yaw(0.5, Vector3::new(1.4, 0.0, 2.3));
        let delta = crate::geometry::relative(&kf, &q);
        assert!(kf.compose(&delta).max_abs_diff(&q) < 1e-9);
    }

    #[test]
    fn missing_flow_is_reported() {
        let map = EmbeddingMap::new(
            vec![KeyframeRecord {
                frame_id: 3,
                embedding: vec![0.0],
                pose: Pose::identity(),
            }],
            [0; 32],
        )
        .unwrap();
        let vo = VoModel::new(VoConfig::default(), 0).unwrap();
        let err = refine(&map, &vo, &StoredFlows::default(), 0, 9).unwrap_err();
        assert!(matches!(err, RelocError::FlowUnavailable { from: 3, to: 9 }));
        let err = refine(&map, &vo, &StoredFlows::default(), 0, 1).unwrap_err();
        assert!(matches!(err, RelocError::FlowUnavailable { from: 1, to: 3 }));
    }

    #[test]
    fn search_prefers_smallest_motion() {
        let world = SyntheticWorld::default();
        let traj = world.trajectory().unwrap();
        let records = [0u64, 4, 8]
            .iter()
            .map(|&id| KeyframeRecord {
                frame_id: id,
                embedding: vec![id as f32],
                pose: *traj.pose_of(id).unwrap(),
            })
            .collect();
        let map = EmbeddingMap::new(records, [0; 32]).unwrap();
        let mut res = query_embedding(&map, &[4.0], Metric::L2, CandidatePolicy::Bottom(1.0)).unwrap();
        let vo = VoModel::new(VoConfig::default(), 0).unwrap();
        let oracle = OracleFlow {
            world: &world,
            poses: &traj,
        };
        let r = search(&map, &vo, &oracle, &mut res, 4).unwrap();
        assert_eq!(res.refined, Some(r.delta));
        assert_eq!(res.best_id, map.records()[r.index].frame_id);
    }
}
