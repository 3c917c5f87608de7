//! Rigid-body pose algebra.
//!
//! Rotations are stored as 3×3 matrices because KITTI pose files are
//! row-major `[R|t]` matrices; axis-angle is only used at the learning
//! boundary (see [`crate::odometry::PoseDelta`]).

use std::fmt;

use nalgebra::{Matrix3, Matrix4, Vector3};
use thiserror::Error;

/// Maximum tolerated deviation of `RᵀR` from identity for a valid rotation.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

/// Drift above which [`compose`] re-orthonormalizes its result.
pub const RENORMALIZE_DRIFT: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation is not orthonormal (drift {drift:.3e})")]
    NotOrthonormal { drift: f64 },
    #[error("pose contains non-finite values")]
    NonFinite,
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("frame ids must be strictly increasing (frame {prev} followed by {next})")]
    UnorderedFrames { prev: u64, next: u64 },
}

/// Largest elementwise deviation from a proper rotation: `max(‖RᵀR − I‖_max, |det R − 1|)`.
pub fn rotation_drift(r: &Matrix3<f64>) -> f64 {
    let gram = r.transpose() * r - Matrix3::identity();
    let ortho = gram.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    ortho.max((r.determinant() - 1.0).abs())
}

/// Gram–Schmidt on the columns, keeping the first column's direction.
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let c0 = r.column(0).into_owned();
    let c1 = r.column(1).into_owned();
    let x = c0.normalize();
    let y = (c1 - x * x.dot(&c1)).normalize();
    let z = x.cross(&y);
    Matrix3::from_columns(&[x, y, z])
}

/// SE(3) rigid transform mapping points from the local frame to the parent frame.
#[derive(Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

/// A pose expressing frame `j` in the coordinates of frame `i`.
pub type RelativePose = Pose;

impl fmt::Debug for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pose")
            .field("rotation", &self.rotation.as_slice())
            .field("translation", &self.translation.as_slice())
            .finish()
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validates orthonormality within [`ORTHONORMAL_TOL`] and finiteness.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let drift = rotation_drift(&rotation);
        if drift > ORTHONORMAL_TOL {
            return Err(GeometryError::NotOrthonormal { drift });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Like [`Pose::new`] but re-orthonormalizes rotations whose drift is at most `tol`.
    pub fn new_renormalized(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        tol: f64,
    ) -> Result<Self, GeometryError> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let drift = rotation_drift(&rotation);
        if drift > tol {
            return Err(GeometryError::NotOrthonormal { drift });
        }
        let rotation = if drift > RENORMALIZE_DRIFT {
            orthonormalize(&rotation)
        } else {
            rotation
        };
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation from an axis-angle vector (Rodrigues), plus a translation.
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: rotation_from_axis_angle(&axis_angle),
            translation,
        }
    }

    /// Rotation about the y axis (yaw in the KITTI camera convention, y pointing down).
    pub fn yaw(angle: f64, translation: Vector3<f64>) -> Self {
        Self::from_axis_angle(Vector3::new(0.0, angle, 0.0), translation)
    }

    /// Parses a row-major 3×4 `[R|t]` block.
    pub fn from_row_major_3x4(v: &[f64; 12]) -> Result<Self, GeometryError> {
        let (r, t) = split_3x4(v);
        Self::new(r, t)
    }

    #[rustfmt::skip]
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
        ]
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn compose(&self, rhs: &RelativePose) -> Pose {
        compose(self, rhs)
    }

    pub fn inverse(&self) -> Pose {
        inverse(self)
    }

    /// Axis-angle vector of the rotation part.
    pub fn axis_angle(&self) -> Vector3<f64> {
        axis_angle_from_rotation(&self.rotation)
    }

    /// Largest elementwise difference between two poses (rotation and translation).
    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        let dr = (self.rotation - other.rotation).abs().max();
        let dt = (self.translation - other.translation).abs().max();
        dr.max(dt)
    }
}

pub(crate) fn split_3x4(v: &[f64; 12]) -> (Matrix3<f64>, Vector3<f64>) {
    let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
    let t = Vector3::new(v[3], v[7], v[11]);
    (r, t)
}

/// `a ∘ b`: rotation `R_a R_b`, translation `R_a t_b + t_a`.
pub fn compose(a: &Pose, b: &RelativePose) -> Pose {
    let mut rotation = a.rotation * b.rotation;
    if rotation_drift(&rotation) > RENORMALIZE_DRIFT {
        rotation = orthonormalize(&rotation);
    }
    Pose {
        rotation,
        translation: a.rotation * b.translation + a.translation,
    }
}

pub fn inverse(p: &Pose) -> Pose {
    let rt = p.rotation.transpose();
    Pose {
        rotation: rt,
        translation: -(rt * p.translation),
    }
}

/// Transform taking frame `b` into the coordinates of frame `a`: `a⁻¹ ∘ b`.
pub fn relative(a: &Pose, b: &Pose) -> RelativePose {
    compose(&inverse(a), b)
}

/// Rotation angle in `[0, π]`.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    c.acos()
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0)
}

pub fn rotation_from_axis_angle(w: &Vector3<f64>) -> Matrix3<f64> {
    let s = w.norm_squared();
    let k = skew(w);
    let (a, b) = if s < 1e-8 {
        (1.0 - s / 6.0 + s * s / 120.0, 0.5 - s / 24.0 + s * s / 720.0)
    } else {
        let theta = s.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / s)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Principal axis-angle vector of a rotation matrix.
///
/// Accurate for angles away from π; near π the axis is recovered from the
/// symmetric part of `R`.
pub fn axis_angle_from_rotation(r: &Matrix3<f64>) -> Vector3<f64> {
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = c.acos();
    let w = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    ) * 0.5;
    if theta < 1e-4 {
        let u = 1.0 - c;
        return w * (1.0 + u / 3.0 + 2.0 * u * u / 15.0);
    }
    if std::f64::consts::PI - theta > 1e-6 {
        return w * (theta / theta.sin());
    }
    // near π: R ≈ 2 a aᵀ − I
    let sym = (r + Matrix3::identity()) * 0.5;
    let mut best = 0;
    for i in 1..3 {
        if sym[(i, i)] > sym[(best, best)] {
            best = i;
        }
    }
    let mut axis = sym.column(best).into_owned() / sym[(best, best)].max(1e-300).sqrt();
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    axis.normalize() * theta
}

/// Ordered `(frame_id, pose)` sequence with strictly increasing ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    entries: Vec<(u64, Pose)>,
}

impl Trajectory {
    pub fn new(entries: Vec<(u64, Pose)>) -> Result<Self, GeometryError> {
        if entries.is_empty() {
            return Err(GeometryError::EmptyTrajectory);
        }
        for w in entries.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(GeometryError::UnorderedFrames {
                    prev: w[0].0,
                    next: w[1].0,
                });
            }
        }
        Ok(Self { entries })
    }

    /// Frames numbered `0..poses.len()`.
    pub fn from_poses(poses: Vec<Pose>) -> Result<Self, GeometryError> {
        Self::new(poses.into_iter().enumerate().map(|(i, p)| (i as u64, p)).collect())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(u64, Pose)] {
        &self.entries
    }

    pub fn poses(&self) -> impl Iterator<Item = &Pose> + '_ {
        self.entries.iter().map(|(_, p)| p)
    }

    pub fn frame_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.iter().map(|(id, _)| *id)
    }

    pub fn first(&self) -> &Pose {
        &self.entries[0].1
    }

    pub fn last(&self) -> &Pose {
        &self.entries[self.entries.len() - 1].1
    }

    pub fn pose_of(&self, frame_id: u64) -> Option<&Pose> {
        self.entries
            .binary_search_by_key(&frame_id, |(id, _)| *id)
            .ok()
            .map(|i| &self.entries[i].1)
    }

    /// Relative poses between consecutive entries.
    pub fn relatives(&self) -> Vec<RelativePose> {
        self.entries
            .windows(2)
            .map(|w| relative(&w[0].1, &w[1].1))
            .collect()
    }

    /// Left-multiplies every pose by `t`.
    pub fn transformed(&self, t: &Pose) -> Trajectory {
        Trajectory {
            entries: self
                .entries
                .iter()
                .map(|(id, p)| (*id, compose(t, p)))
                .collect(),
        }
    }

    /// Entries whose frame ids are present in both trajectories, paired in order.
    pub fn common_frames<'a>(&'a self, other: &'a Trajectory) -> Vec<(u64, &'a Pose, &'a Pose)> {
        let mut out = Vec::new();
        let (mut i, mut j) = (0, 0);
        while i < self.entries.len() && j < other.entries.len() {
            let (a, b) = (self.entries[i].0, other.entries[j].0);
            match a.cmp(&b) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    out.push((a, &self.entries[i].1, &other.entries[j].1));
                    i += 1;
                    j += 1;
                }
            }
        }
        out
    }
}
