//! Pose regression losses. Predictions arrive as an `[n, 6]` tape value with
//! columns `(tx, ty, tz, rx, ry, rz)`; ground truth is a list of relative poses.
//!
//! Per step: `‖t̂ − t‖² + κ‖r̂ − r‖²`. The windowed composition loss applies the
//! same expression to the composite of `w` consecutive deltas and averages it
//! over every window position.

use super::so3::{log_map, PoseVar};
use super::{OdometryError, PoseDelta};
use crate::geometry::{self, Pose, RelativePose};
use crate::tensor::{Scalar, Tape, TensorError, Var};

/// Weight of the rotation term relative to the translation term.
pub const DEFAULT_KAPPA: f64 = 100.0;

#[allow(clippy::too_many_arguments)]
fn pose_error<T: Scalar>(
    tape: &mut Tape<T>,
    t: Var,
    r: Var,
    gt_t: &[f64],
    gt_r: &[f64],
    t_shape: &[usize],
    r_shape: &[usize],
    kappa: f64,
) -> Result<Var, TensorError> {
    let gt_t = tape.constant_f64(t_shape, gt_t)?;
    let gt_r = tape.constant_f64(r_shape, gt_r)?;
    let dt = tape.sub(t, gt_t)?;
    let dr = tape.sub(r, gt_r)?;
    let lt = tape.sum_sq(dt)?;
    let lr = tape.sum_sq(dr)?;
    let lr = tape.scale(lr, kappa)?;
    tape.add(lt, lr)
}

fn check_pred<T: Scalar>(tape: &Tape<T>, pred: Var, n: usize) -> Result<(), TensorError> {
    if tape.shape(pred) != [n, 6] {
        return Err(TensorError::ShapeMismatch {
            op: "pose loss",
            lhs: tape.shape(pred).to_vec(),
            rhs: vec![n, 6],
        });
    }
    Ok(())
}

/// Mean per-step loss over the rows of `pred`.
pub fn step_loss_var<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    gts: &[RelativePose],
    kappa: f64,
) -> Result<Var, TensorError> {
    let n = gts.len();
    check_pred(tape, pred, n)?;
    let t = tape.slice(pred, 1, 0, 3)?;
    let r = tape.slice(pred, 1, 3, 3)?;
    let mut gt_t = Vec::with_capacity(3 * n);
    let mut gt_r = Vec::with_capacity(3 * n);
    for g in gts {
        gt_t.extend_from_slice(g.translation().as_slice());
        gt_r.extend_from_slice(g.axis_angle().as_slice());
    }
    let total = pose_error(tape, t, r, &gt_t, &gt_r, &[n, 3], &[n, 3], kappa)?;
    tape.scale(total, 1.0 / n as f64)
}

/// Mean composite loss over every window of `window` consecutive rows.
/// A window of one is the per-step loss.
pub fn composition_loss_var<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    gts: &[RelativePose],
    window: usize,
    kappa: f64,
) -> Result<Var, OdometryError> {
    let n = gts.len();
    if window == 0 || window > n {
        return Err(OdometryError::WindowTooLarge { window, len: n });
    }
    if window == 1 {
        return Ok(step_loss_var(tape, pred, gts, kappa)?);
    }
    check_pred(tape, pred, n)?;
    let mut poses = Vec::with_capacity(n);
    for k in 0..n {
        let row = tape.slice(pred, 0, k, 1)?;
        let t = tape.slice(row, 1, 0, 3)?;
        let r = tape.slice(row, 1, 3, 3)?;
        poses.push(PoseVar::from_parts(tape, t, r)?);
    }
    let windows = n - window + 1;
    let mut total: Option<Var> = None;
    for s in 0..windows {
        let mut comp = poses[s];
        let mut gt: Pose = gts[s];
        for k in s + 1..s + window {
            comp = comp.compose(tape, &poses[k])?;
            gt = geometry::compose(&gt, &gts[k]);
        }
        let r = log_map(tape, comp.rotation)?;
        let term = pose_error(
            tape,
            comp.translation,
            r,
            gt.translation().as_slice(),
            gt.axis_angle().as_slice(),
            &[3, 1],
            &[3],
            kappa,
        )?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(tape.scale(total.expect("at least one window"), 1.0 / windows as f64)?)
}

fn pred_tensor(tape: &mut Tape<f64>, preds: &[PoseDelta]) -> Result<Var, TensorError> {
    let data: Vec<f64> = preds.iter().flat_map(|p| p.to_array()).collect();
    tape.constant_f64(&[preds.len(), 6], &data)
}

/// Per-step loss of a single prediction, evaluated in `f64`.
pub fn step_loss(pred: &PoseDelta, gt: &RelativePose, kappa: f64) -> f64 {
    let mut tape = Tape::<f64>::new();
    let p = pred_tensor(&mut tape, std::slice::from_ref(pred)).expect("shape [1, 6]");
    let l = step_loss_var(&mut tape, p, std::slice::from_ref(gt), kappa).expect("shape [1, 6]");
    tape.value(l).item()
}

/// Windowed composition loss evaluated in `f64`.
pub fn composition_loss(
    preds: &[PoseDelta],
    gts: &[RelativePose],
    window: usize,
    kappa: f64,
) -> Result<f64, OdometryError> {
    if preds.len() != gts.len() {
        return Err(OdometryError::InvalidPlan(format!(
            "{} predictions for {} ground-truth steps",
            preds.len(),
            gts.len()
        )));
    }
    let mut tape = Tape::<f64>::new();
    let p = pred_tensor(&mut tape, preds)?;
    let l = composition_loss_var(&mut tape, p, gts, window, kappa)?;
    Ok(tape.value(l).item())
}


#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn gt(k: usize) -> RelativePose {
        Pose::from_axis_angle(
            Vector3::new(0.01 * k as f64, -0.02, 0.03),
            Vector3::new(0.2, -0.1 * k as f64, 0.5),
        )
    }

    #[test]
    fn exact_prediction_is_zero() {
        let gts: Vec<_> = (0..6).map(gt).collect();
        let preds: Vec<_> = gts.iter().map(PoseDelta::from_pose).collect();
        assert!(step_loss(&preds[0], &gts[0], DEFAULT_KAPPA) == 0.0);
        for w in 1..=6 {
            assert!(composition_loss(&preds, &gts, w, DEFAULT_KAPPA).unwrap() < 1e-20);
        }
    }

    #[test]
    fn translation_offset() {
        let g = Pose::identity();
        let p = PoseDelta::new(Vector3::new(0.1, 0.0, 0.0), Vector3::zeros());
        assert!((step_loss(&p, &g, 100.0) - 0.01).abs() < 1e-15);
        let m = PoseDelta::new(Vector3::new(-0.1, 0.0, 0.0), Vector3::zeros());
        assert_eq!(step_loss(&p, &g, 100.0), step_loss(&m, &g, 100.0));
    }

    #[test]
    fn window_too_large() {
        let gts: Vec<_> = (0..3).map(gt).collect();
        let preds: Vec<_> = gts.iter().map(PoseDelta::from_pose).collect();
        assert!(matches!(
            composition_loss(&preds, &gts, 4, 1.0),
            Err(OdometryError::WindowTooLarge { window: 4, len: 3 })
        ));
    }
}
