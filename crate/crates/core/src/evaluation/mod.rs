//! Trajectory metrics, figure data and the comparison report.

mod metrics;
mod plots;
mod report;

use std::io;

use thiserror::Error;

pub use metrics::{
    kitti_errors, path_distances, segment_error, summarize, LengthError, MetricResult,
    KITTI_LENGTHS,
};
pub use plots::{
    emit_axes_csv, emit_distance_profile, emit_xz_svg, histogram, AXES_HEADER, DEFAULT_BINS,
};
pub use report::{bundled_baselines, table1_report, table1_tsv, ReportRow};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("trajectories share no frame ids")]
    NoCommonFrames,
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("trajectory contains non-finite positions")]
    NonFinite,
    #[error("distance profile is empty or misaligned")]
    EmptyProfile,
    #[error("evaluation lengths must be positive and finite")]
    InvalidLengths,
    #[error(transparent)]
    Io(io::Error),
}
