//! Rotation maps recorded on the tape so losses can differentiate through
//! pose composition.

use crate::tensor::{Scalar, Tape, TensorError, Unary, Var};

/// `r ↦ vec(K(r))`, the skew-symmetric matrix in row-major order.
#[rustfmt::skip]
const SKEW: [f64; 27] = [
    0.0,  0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0,
    0.0,  0.0, 1.0, 0.0, 0.0,  0.0, -1.0, 0.0, 0.0,
    0.0, -1.0, 0.0, 1.0, 0.0,  0.0, 0.0, 0.0, 0.0,
];

/// `vec(R) ↦ (w, trace/2)` where `w = vee(R − Rᵀ)/2`.
#[rustfmt::skip]
const VEE_TRACE: [f64; 36] = [
    0.0,  0.0,  0.0, 0.5,
    0.0,  0.0, -0.5, 0.0,
    0.0,  0.5,  0.0, 0.0,
    0.0,  0.0,  0.5, 0.0,
    0.0,  0.0,  0.0, 0.5,
    -0.5, 0.0,  0.0, 0.0,
    0.0, -0.5,  0.0, 0.0,
    0.5,  0.0,  0.0, 0.0,
    0.0,  0.0,  0.0, 0.5,
];

/// Rotation matrix `[3, 3]` from an axis-angle vector with 3 elements,
/// `R = I + A(θ²)·K + B(θ²)·K²`.
pub fn exp_map<T: Scalar>(tape: &mut Tape<T>, r: Var) -> Result<Var, TensorError> {
    let row = tape.reshape(r, &[1, 3])?;
    let skew = tape.constant_f64(&[3, 9], &SKEW)?;
    let k = tape.matmul(row, skew)?;
    let k = tape.reshape(k, &[3, 3])?;
    let k2 = tape.matmul(k, k)?;
    let s = tape.sum_sq(r)?;
    let a = tape.unary(s, Unary::RodriguesA)?;
    let b = tape.unary(s, Unary::RodriguesB)?;
    let ak = tape.mul(k, a)?;
    let bk2 = tape.mul(k2, b)?;
    let eye = tape.constant_f64(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])?;
    let sum = tape.add(eye, ak)?;
    tape.add(sum, bk2)
}

/// Axis-angle `[3]` of a rotation matrix `[3, 3]` whose angle is below π.
pub fn log_map<T: Scalar>(tape: &mut Tape<T>, rot: Var) -> Result<Var, TensorError> {
    let flat = tape.reshape(rot, &[1, 9])?;
    let m = tape.constant_f64(&[9, 4], &VEE_TRACE)?;
    let wc = tape.matmul(flat, m)?;
    let w = tape.slice(wc, 1, 0, 3)?;
    let half_trace = tape.slice(wc, 1, 3, 1)?;
    let c = tape.shift(half_trace, -0.5)?;
    let k = tape.unary(c, Unary::AngleOverSine)?;
    let r = tape.mul(w, k)?;
    tape.reshape(r, &[3])
}

/// Rigid transform held on the tape: rotation `[3, 3]`, translation `[3, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct PoseVar {
    pub rotation: Var,
    pub translation: Var,
}

impl PoseVar {
    /// Builds a pose from an axis-angle `[3]` and a translation `[3]`.
    pub fn from_parts<T: Scalar>(tape: &mut Tape<T>, t: Var, r: Var) -> Result<Self, TensorError> {
        Ok(Self {
            rotation: exp_map(tape, r)?,
            translation: tape.reshape(t, &[3, 1])?,
        })
    }

    /// `self ∘ rhs`.
    pub fn compose<T: Scalar>(&self, tape: &mut Tape<T>, rhs: &PoseVar) -> Result<Self, TensorError> {
        let rotation = tape.matmul(self.rotation, rhs.rotation)?;
        let rt = tape.matmul(self.rotation, rhs.translation)?;
        let translation = tape.add(rt, self.translation)?;
        Ok(Self {
            rotation,
            translation,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry;
    use nalgebra::{Matrix3, Vector3};

    fn to_matrix(t: &Tape<f64>, v: Var) -> Matrix3<f64> {
        Matrix3::from_row_slice(t.value(v).data())
    }

    #[test]
    fn exp_matches_geometry() {
        for w in [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1e-5, -2e-5, 3e-6),
            Vector3::new(0.3, -0.2, 0.9),
            Vector3::new(0.0, 2.5, 0.0),
        ] {
            let mut t = Tape::<f64>::new();
            let r = t.constant_f64(&[3], w.as_slice()).unwrap();
            let m = exp_map(&mut t, r).unwrap();
            let expect = geometry::rotation_from_axis_angle(&w);
            assert!((to_matrix(&t, m) - expect).abs().max() < 1e-12, "{w:?}");
        }
    }

    #[test]
    fn log_inverts_exp() {
        for w in [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1e-4, 0.0, -1e-4),
            Vector3::new(0.3, -0.2, 0.9),
            Vector3::new(-1.0, 1.5, 0.2),
        ] {
            let mut t = Tape::<f64>::new();
            let r = t.constant_f64(&[3], w.as_slice()).unwrap();
            let m = exp_map(&mut t, r).unwrap();
            let back = log_map(&mut t, m).unwrap();
            let back = Vector3::from_column_slice(t.value(back).data());
            assert!((back - w).norm() < 1e-10, "{w:?} -> {back:?}");
        }
    }
}
