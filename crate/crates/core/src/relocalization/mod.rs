//! Keyframe embedding map and loosely coupled relocalization: embed the
//! query, measure its distance to every keyframe, take the minimum, and
//! optionally refine the pose with visual odometry.

mod refine;
mod store;

use std::io;

use rayon::prelude::*;
use thiserror::Error;

use crate::dataio::{DataError, Frame};
use crate::geometry::{Pose, RelativePose};
use crate::mapping::{MapModel, MappingError};
use crate::odometry::OdometryError;

pub use refine::{refine, search, FlowSource, OracleFlow, Refinement, StoredFlows};
pub use store::{load_map, load_map_with_limit, save_map, MAP_MAGIC, MAP_VERSION};

#[derive(Debug, Error)]
pub enum RelocError {
    #[error("the map has no keyframes")]
    EmptyMap,
    #[error("embedding has dimension {actual}, map expects {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("frame ids must be strictly increasing (saw {0} out of order)")]
    UnorderedFrames(u64),
    #[error("keyframe {0} has no pose")]
    MissingPose(u64),
    #[error("no flow available from frame {from} to frame {to}")]
    FlowUnavailable { from: u64, to: u64 },
    #[error("not a map file (bad magic)")]
    BadMagic,
    #[error("unsupported map version {0}")]
    UnsupportedVersion(u32),
    #[error("map file is truncated")]
    Truncated,
    #[error("map file exceeds the size cap of {cap} bytes")]
    Oversized { cap: u64 },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("map was built by a different model")]
    FingerprintMismatch,
    #[error("stored pose of frame {0} is not a rigid transform")]
    InvalidPose(u64),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Odometry(#[from] OdometryError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for RelocError {
    fn from(e: io::Error) -> Self {
        if crate::binio::is_eof(&e) {
            Self::Truncated
        } else {
            Self::Io(e)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeRecord {
    pub frame_id: u64,
    pub embedding: Vec<f32>,
    pub pose: Pose,
}

/// Immutable set of keyframe records sharing one embedding dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMap {
    records: Vec<KeyframeRecord>,
    dim: usize,
    fingerprint: [u8; 32],
}

impl EmbeddingMap {
    pub fn new(records: Vec<KeyframeRecord>, fingerprint: [u8; 32]) -> Result<Self, RelocError> {
        let dim = records.first().ok_or(RelocError::EmptyMap)?.embedding.len();
        if dim == 0 {
            return Err(RelocError::DimensionMismatch { expected: 1, actual: 0 });
        }
        for (k, r) in records.iter().enumerate() {
            if r.embedding.len() != dim {
                return Err(RelocError::DimensionMismatch {
                    expected: dim,
                    actual: r.embedding.len(),
                });
            }
            if k > 0 && r.frame_id <= records[k - 1].frame_id {
                return Err(RelocError::UnorderedFrames(r.frame_id));
            }
        }
        Ok(Self {
            records,
            dim,
            fingerprint,
        })
    }

    pub fn records(&self) -> &[KeyframeRecord] {
        &self.records
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// SHA-256 of the checkpoint of the model that produced the embeddings.
    pub fn fingerprint(&self) -> &[u8; 32] {
        &self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Embeds every keyframe with the bottleneck mean, so rebuilding from the
/// same model and frames yields identical records.
pub fn build_map(model: &MapModel, keyframes: &[Frame]) -> Result<EmbeddingMap, RelocError> {
    if keyframes.is_empty() {
        return Err(RelocError::EmptyMap);
    }
    const CHUNK: usize = 16;
    let embeddings: Vec<Vec<Vec<f32>>> = keyframes
        .par_chunks(CHUNK)
        .map(|chunk| {
            let images: Vec<_> = chunk.iter().map(|f| f.image.clone()).collect();
            model.embed_batch(&images)
        })
        .collect::<Result<_, _>>()?;
    let records = keyframes
        .iter()
        .zip(embeddings.into_iter().flatten())
        .map(|(f, embedding)| {
            Ok(KeyframeRecord {
                frame_id: f.frame_id,
                embedding,
                pose: f.pose.ok_or(RelocError::MissingPose(f.frame_id))?,
            })
        })
        .collect::<Result<Vec<_>, RelocError>>()?;
    EmbeddingMap::new(records, model.fingerprint())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    #[default]
    L2,
    L1,
}

impl Metric {
    pub fn distance(self, a: &[f32], b: &[f32]) -> f64 {
        let diffs = a.iter().zip(b).map(|(&x, &y)| x as f64 - y as f64);
        match self {
            Metric::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
            Metric::L1 => diffs.map(f64::abs).sum(),
        }
    }
}

/// Rule for the outlier candidates that go on to pose refinement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CandidatePolicy {
    /// Distances below `mean − k·std` (population std).
    ZScore(f64),
    /// The `ceil(q·n)` smallest distances.
    Bottom(f64),
}

impl Default for CandidatePolicy {
    fn default() -> Self {
        Self::ZScore(2.0)
    }
}

/// Index of the smallest distance; ties go to the earliest entry.
pub fn argmin(profile: &[f64]) -> Option<usize> {
    profile
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &d)| match best {
            Some((_, b)) if b <= d => best,
            _ => Some((i, d)),
        })
        .map(|(i, _)| i)
}

/// Candidate indices in ascending order; the argmin is always present.
pub fn candidates(profile: &[f64], policy: CandidatePolicy) -> Vec<usize> {
    let Some(best) = argmin(profile) else {
        return Vec::new();
    };
    let n = profile.len() as f64;
    let mut out: Vec<usize> = match policy {
        CandidatePolicy::ZScore(k) => {
            let mean = profile.iter().sum::<f64>() / n;
            let var = profile.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
            let cut = mean - k * var.sqrt();
            (0..profile.len()).filter(|&i| profile[i] < cut).collect()
        }
        CandidatePolicy::Bottom(q) => {
            let take = ((q.clamp(0.0, 1.0) * n).ceil() as usize).max(1);
            let mut order: Vec<usize> = (0..profile.len()).collect();
            order.sort_by(|&a, &b| profile[a].total_cmp(&profile[b]).then(a.cmp(&b)));
            order.truncate(take);
            order
        }
    };
    if !out.contains(&best) {
        out.push(best);
    }
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelocResult {
    /// Index into the map's records.
    pub best_index: usize,
    pub best_id: u64,
    pub best_distance: f64,
    /// Distance to every record, in map order.
    pub profile: Vec<f64>,
    /// Record indices flagged as outliers of the profile.
    pub candidates: Vec<usize>,
    /// Keyframe-to-query motion, once refined.
    pub refined: Option<RelativePose>,
}

/// Steps one and two of relocalization against an already computed embedding.
pub fn query_embedding(
    map: &EmbeddingMap,
    embedding: &[f32],
    metric: Metric,
    policy: CandidatePolicy,
) -> Result<RelocResult, RelocError> {
    if map.is_empty() {
        return Err(RelocError::EmptyMap);
    }
    if embedding.len() != map.dim() {
        return Err(RelocError::DimensionMismatch {
            expected: map.dim(),
            actual: embedding.len(),
        });
    }
    let profile: Vec<f64> = map
        .records()
        .iter()
        .map(|r| metric.distance(embedding, &r.embedding))
        .collect();
    let best_index = argmin(&profile).expect("non-empty");
    Ok(RelocResult {
        best_index,
        best_id: map.records()[best_index].frame_id,
        best_distance: profile[best_index],
        candidates: candidates(&profile, policy),
        profile,
        refined: None,
    })
}

/// Embeds `image` with the bottleneck mean and finds the nearest keyframe.
pub fn query(
    map: &EmbeddingMap,
    model: &MapModel,
    image: &crate::dataio::Image,
    metric: Metric,
    policy: CandidatePolicy,
) -> Result<RelocResult, RelocError> {
    if map.is_empty() {
        return Err(RelocError::EmptyMap);
    }
    let e = model.embed(image)?;
    query_embedding(map, &e, metric, policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Image;
    use crate::mapping::MapConfig;
    use crate::tensor::SeededRng;

    fn unit_map(n: usize) -> EmbeddingMap {
        let records = (0..n)
            .map(|k| {
                let mut e = vec![0.0f32; n];
                e[k] = 1.0;
                KeyframeRecord {
                    frame_id: 10 * k as u64,
                    embedding: e,
                    pose: Pose::identity(),
                }
            })
            .collect();
        EmbeddingMap::new(records, [7; 32]).unwrap()
    }

    #[test]
    fn nearest_orthogonal_record() {
        let map = unit_map(6);
        let mut q = vec![0.001f32; 6];
        q[4] = 1.0;
        let r = query_embedding(&map, &q, Metric::L2, CandidatePolicy::default()).unwrap();
        assert_eq!((r.best_index, r.best_id), (4, 40));
        assert!(r.profile.iter().all(|&d| d >= r.best_distance));
    }

    #[test]
    fn single_record_always_wins() {
        let map = unit_map(1);
        let r = query_embedding(&map, &[-5.0], Metric::L1, CandidatePolicy::default()).unwrap();
        assert_eq!((r.best_id, r.best_distance), (0, 6.0));
    }

    #[test]
    fn candidate_policies() {
        assert_eq!(candidates(&[3.0; 4], CandidatePolicy::ZScore(2.0)), vec![0]);
        let p = [0.0, 10.0, 10.0, 10.0, 10.0];
        assert_eq!(candidates(&p, CandidatePolicy::ZScore(1.0)), vec![0]);
        assert_eq!(candidates(&p, CandidatePolicy::Bottom(1.0)).len(), 5);
        assert_eq!(candidates(&[5.0, 1.0, 3.0], CandidatePolicy::Bottom(0.5)), vec![1, 2]);
        assert_eq!(candidates(&[5.0, 1.0, 3.0], CandidatePolicy::ZScore(10.0)), vec![1]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(argmin(&[2.0, 1.0, 1.0]), Some(1));
        assert_eq!(argmin(&[]), None);
    }

    #[test]
    fn map_invariants() {
        assert!(matches!(EmbeddingMap::new(vec![], [0; 32]), Err(RelocError::EmptyMap)));
        let rec = |id, d: usize| KeyframeRecord {
            frame_id: id,
            embedding: vec![0.0; d],
            pose: Pose::identity(),
        };
        assert!(matches!(
            EmbeddingMap::new(vec![rec(0, 2), rec(1, 3)], [0; 32]),
            Err(RelocError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            EmbeddingMap::new(vec![rec(2, 2), rec(2, 2)], [0; 32]),
            Err(RelocError::UnorderedFrames(2))
        ));
    }

    #[test]
    fn self_query_is_exact() {
        let model = MapModel::new(
            MapConfig {
                image_size: 8,
                channels: vec![2],
                embedding_dim: 5,
                ..MapConfig::default()
            },
            1,
        )
        .unwrap();
        let mut rng = SeededRng::new(2);
        let frames: Vec<Frame> = (0..20)
            .map(|k| Frame {
                frame_id: k,
                image: Image::new(8, 8, (0..64).map(|_| rng.uniform() as f32).collect()).unwrap(),
                pose: Some(Pose::identity()),
            })
            .collect();
        let map = build_map(&model, &frames).unwrap();
        assert_eq!(map.len(), 20);
        for (k, f) in frames.iter().enumerate() {
            let r = query(&map, &model, &f.image, Metric::L2, CandidatePolicy::default()).unwrap();
            assert_eq!((r.best_index, r.best_distance), (k, 0.0));
        }
        assert!(matches!(build_map(&model, &[]), Err(RelocError::EmptyMap)));
    }
}
