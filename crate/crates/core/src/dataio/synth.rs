//! Synthetic sequences: a downward-looking pinhole camera carried over a
//! textured ground plane.
//!
//! Body poses follow the KITTI camera convention (x right, y down, z forward),
//! so the vehicle moves in the x–z plane and yaws about y. The camera is
//! mounted looking straight down at the plane `y = plane_depth`; its image x
//! axis is the body x axis and its image y axis points backwards.

use nalgebra::{Matrix3, Vector3};

use super::{DataError, FlowField, Frame, Image};
use crate::geometry::{Pose, Trajectory};

/// Camera axes expressed in the body frame (columns: image x, image y, optical axis).
#[rustfmt::skip]
fn mount() -> Matrix3<f64> {
    Matrix3::new(
        1.0, 0.0,  0.0,
        0.0, 0.0,  1.0,
        0.0, -1.0, 0.0,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrajectorySpec {
    /// Every frame at the origin.
    Stationary,
    /// Constant forward (+z) motion of `speed` metres per frame.
    Straight { speed: f64 },
    /// Frame `k` of `n` at angle `2πk/n` on a circle about the origin, facing along the tangent.
    Circle { radius: f64 },
    /// Like `Circle` on an axis-aligned ellipse.
    Ellipse { semi_x: f64, semi_z: f64 },
    /// Explicit `[x, z, yaw]` per frame; the frame count must match.
    Waypoints(Vec<[f64; 3]>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    /// Height of the camera above the ground plane, metres.
    pub plane_depth: f64,
    /// Focal length, pixels.
    pub focal: f64,
    /// Principal point `(cx, cy)`, pixels.
    pub principal: [f64; 2],
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub trajectory: TrajectorySpec,
    /// Size of the coarsest texture cell, metres.
    pub texture_cell: f64,
}

impl Default for SyntheticWorld {
    fn default() -> Self {
        Self {
            plane_depth: 2.0,
            focal: 50.0,
            principal: [31.5, 31.5],
            width: 64,
            height: 64,
            frames: 100,
            trajectory: TrajectorySpec::Circle { radius: 5.0 },
            texture_cell: 0.5,
        }
    }
}

const TEXTURE_OCTAVES: u32 = 4;

impl SyntheticWorld {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidWorld(m.to_string()));
        if !(self.plane_depth > 0.0 && self.plane_depth.is_finite()) {
            return bad("plane depth must be positive");
        }
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return bad("focal length must be positive");
        }
        if !self.principal.iter().all(|v| v.is_finite()) {
            return bad("principal point must be finite");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive");
        }
        if self.frames < 3 {
            return bad("at least 3 frames are required");
        }
        if !(self.texture_cell > 0.0 && self.texture_cell.is_finite()) {
            return bad("texture cell must be positive");
        }
        let ok = match &self.trajectory {
            TrajectorySpec::Stationary => true,
            TrajectorySpec::Straight { speed } => speed.is_finite(),
            TrajectorySpec::Circle { radius } => *radius > 0.0 && radius.is_finite(),
            TrajectorySpec::Ellipse { semi_x, semi_z } => {
                *semi_x > 0.0 && *semi_z > 0.0 && semi_x.is_finite() && semi_z.is_finite()
            }
            TrajectorySpec::Waypoints(p) => {
                p.len() == self.frames && p.iter().flatten().all(|v| v.is_finite())
            }
        };
        if !ok {
            return bad("trajectory parameters are invalid");
        }
        Ok(())
    }

    /// Ground-truth body pose of frame `k`.
    pub fn pose(&self, k: usize) -> Pose {
        let n = self.frames as f64;
        match &self.trajectory {
            TrajectorySpec::Stationary => Pose::identity(),
            TrajectorySpec::Straight { speed } => {
                Pose::from_translation(Vector3::new(0.0, 0.0, speed * k as f64))
            }
            TrajectorySpec::Circle { radius } => {
                let phi = 2.0 * std::f64::consts::PI * k as f64 / n;
                Pose::yaw(
                    -phi,
                    Vector3::new(radius * phi.cos(), 0.0, radius * phi.sin()),
                )
            }
            TrajectorySpec::Ellipse { semi_x, semi_z } => {
                let phi = 2.0 * std::f64::consts::PI * k as f64 / n;
                let (s, c) = phi.sin_cos();
                let heading = (-semi_x * s).atan2(semi_z * c);
                Pose::yaw(heading, Vector3::new(semi_x * c, 0.0, semi_z * s))
            }
            TrajectorySpec::Waypoints(p) => {
                let [x, z, yaw] = p[k];
                Pose::yaw(yaw, Vector3::new(x, 0.0, z))
            }
        }
    }

    pub fn trajectory(&self) -> Result<Trajectory, DataError> {
        self.validate()?;
        Trajectory::from_poses((0..self.frames).map(|k| self.pose(k)).collect())
            .map_err(|e| DataError::InvalidWorld(e.to_string()))
    }

    /// World-frame ray origin and direction through pixel `(u, v)`.
    fn ray(&self, body: &Pose, u: f64, v: f64) -> (Vector3<f64>, Vector3<f64>) {
        let d_cam = Vector3::new(
            (u - self.principal[0]) / self.focal,
            (v - self.principal[1]) / self.focal,
            1.0,
        );
        (*body.translation(), body.rotation() * mount() * d_cam)
    }

    /// Ground-plane point seen through pixel `(u, v)`, if any.
    pub fn backproject(&self, body: &Pose, u: f64, v: f64) -> Option<Vector3<f64>> {
        let (o, d) = self.ray(body, u, v);
        if d.y <= 0.0 {
            return None;
        }
        let lambda = (self.plane_depth - o.y) / d.y;
        (lambda > 0.0).then(|| o + d * lambda)
    }

    /// Pixel coordinates of world point `x`, if it lies in front of the camera.
    pub fn project(&self, body: &Pose, x: &Vector3<f64>) -> Option<(f64, f64)> {
        let p = mount().transpose() * body.rotation().transpose() * (x - body.translation());
        (p.z > 0.0).then(|| {
            (
                self.focal * p.x / p.z + self.principal[0],
                self.focal * p.y / p.z + self.principal[1],
            )
        })
    }

    /// Renders the plane texture seen from `body`.
    pub fn render(&self, body: &Pose, seed: u64) -> Result<Image, DataError> {
        let mut data = Vec::with_capacity(self.width * self.height);
        for v in 0..self.height {
            for u in 0..self.width {
                let x = self
                    .backproject(body, u as f64, v as f64)
                    .ok_or(DataError::BehindCamera {
                        u: u as f64,
                        v: v as f64,
                    })?;
                data.push(texture(x.x, x.z, self.texture_cell, seed) as f32);
            }
        }
        Image::new(self.height, self.width, data)
    }
}

fn lattice(ix: i64, iz: i64, octave: u32, seed: u64) -> f64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [ix as u64, iz as u64, octave as u64] {
        h ^= v.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = splitmix(h);
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave value noise in `[0, 1]`.
fn texture(x: f64, z: f64, cell: f64, seed: u64) -> f64 {
    let (mut total, mut norm, mut amp, mut scale) = (0.0, 0.0, 1.0, cell);
    for octave in 0..TEXTURE_OCTAVES {
        let (gx, gz) = (x / scale, z / scale);
        let (fx, fz) = (gx.floor(), gz.floor());
        let (tx, tz) = (smooth(gx - fx), smooth(gz - fz));
        let (ix, iz) = (fx as i64, fz as i64);
        let a = lattice(ix, iz, octave, seed);
        let b = lattice(ix + 1, iz, octave, seed);
        let c = lattice(ix, iz + 1, octave, seed);
        let d = lattice(ix + 1, iz + 1, octave, seed);
        let top = a + (b - a) * tx;
        let bottom = c + (d - c) * tx;
        total += amp * (top + (bottom - top) * tz);
        norm += amp;
        amp *= 0.5;
        scale *= 0.5;
    }
    (total / norm).clamp(0.0, 1.0)
}

/// Renders every frame of `world` with the texture selected by `seed`.
pub fn synth_sequence(world: &SyntheticWorld, seed: u64) -> Result<(Vec<Frame>, Trajectory), DataError> {
    let traj = world.trajectory()?;
    let frames = traj
        .entries()
        .iter()
        .map(|(id, pose)| {
            Ok(Frame {
                frame_id: *id,
                image: world.render(pose, seed)?,
                pose: Some(*pose),
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    Ok((frames, traj))
}

/// Exact displacement of pixel `(u, v)` from the view at `pose_i` to the view at `pose_j`.
pub fn flow_at(
    world: &SyntheticWorld,
    pose_i: &Pose,
    pose_j: &Pose,
    u: f64,
    v: f64,
) -> Result<(f64, f64), DataError> {
    let x = world
        .backproject(pose_i, u, v)
        .ok_or(DataError::BehindCamera { u, v })?;
    let (u2, v2) = world
        .project(pose_j, &x)
        .ok_or(DataError::BehindCamera { u, v })?;
    Ok((u2 - u, v2 - v))
}

/// Dense flow field from frame `i` to frame `j` at every pixel centre.
pub fn flow_oracle(world: &SyntheticWorld, pose_i: &Pose, pose_j: &Pose) -> Result<FlowField, DataError> {
    world.validate()?;
    let mut data = Vec::with_capacity(world.width * world.height * 2);
    for v in 0..world.height {
        for u in 0..world.width {
            let (du, dv) = flow_at(world, pose_i, pose_j, u as f64, v as f64)?;
            data.push(du as f32);
            data.push(dv as f32);
        }
    }
    FlowField::new(world.height, world.width, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(trajectory: TrajectorySpec) -> SyntheticWorld {
        SyntheticWorld {
            width: 16,
            height: 12,
            principal: [7.5, 5.5],
            frames: 8,
            trajectory,
            ..Default::default()
        }
    }

    #[test]
    fn stationary_frames_identical() {
        let (frames, traj) = synth_sequence(&small(TrajectorySpec::Stationary), 5).unwrap();
        assert!(traj.poses().all(|p| *p == Pose::identity()));
        assert!(frames.windows(2).all(|w| w[0].image == w[1].image));
    }

    #[test]
    fn seeds_select_textures() {
        let w = small(TrajectorySpec::Straight { speed: 0.1 });
        let (a, _) = synth_sequence(&w, 1).unwrap();
        let (b, _) = synth_sequence(&w, 1).unwrap();
        let (c, _) = synth_sequence(&w, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].image, c[0].image);
    }

    #[test]
    fn degenerate_worlds_rejected() {
        let mut w = small(TrajectorySpec::Stationary);
        w.plane_depth = 0.0;
        assert!(w.validate().is_err());
        let mut w = small(TrajectorySpec::Stationary);
        w.frames = 2;
        assert!(w.validate().is_err());
        let w = small(TrajectorySpec::Waypoints(vec![[0.0; 3]; 3]));
        assert!(w.validate().is_err());
    }

    #[test]
    fn circle_faces_tangent() {
        let w = small(TrajectorySpec::Circle { radius: 3.0 });
        let p0 = w.pose(0);
        let p1 = w.pose(1);
        let fwd = p0.rotation() * Vector3::z();
        let step = (p1.translation() - p0.translation()).normalize();
        assert!(fwd.dot(&step) > 0.9);
    }

    #[test]
    fn centre_pixel_sees_point_below() {
        let w = small(TrajectorySpec::Stationary);
        let x = w.backproject(&Pose::identity(), 7.5, 5.5).unwrap();
        assert!((x - Vector3::new(0.0, 2.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn texture_in_range() {
        for i in 0..1000 {
            let t = texture(i as f64 * 0.137 - 50.0, i as f64 * -0.071, 0.5, 9);
            assert!((0.0..=1.0).contains(&t));
        }
    }
}
