//! Figure data: per-axis CSV, X–Z SVG map, and distance-profile CSVs.

use std::fmt::Write as _;
use std::io::{self, Write};

use super::EvalError;
use crate::geometry::Trajectory;

pub const AXES_HEADER: &str = "frame,gt_x,gt_y,gt_z,est_x,est_y,est_z";
pub const DEFAULT_BINS: usize = 50;

/// One row per frame present in both trajectories; returns the row count.
pub fn emit_axes_csv(gt: &Trajectory, est: &Trajectory, sink: &mut impl Write) -> Result<usize, EvalError> {
    let common = gt.common_frames(est);
    if common.is_empty() {
        return Err(EvalError::NoCommonFrames);
    }
    let mut out = String::with_capacity(common.len() * 96);
    out.push_str(AXES_HEADER);
    out.push('\n');
    for (id, g, e) in &common {
        let (g, e) = (g.translation(), e.translation());
        let _ = writeln!(out, "{id},{},{},{},{},{},{}", g.x, g.y, g.z, e.x, e.y, e.z);
    }
    sink.write_all(out.as_bytes())?;
    Ok(common.len())
}

const SVG_SIZE: f64 = 800.0;
const SVG_MARGIN: f64 = 40.0;

/// Bird's-eye X–Z view of both paths with a shared, aspect-preserving scale.
pub fn emit_xz_svg(gt: &Trajectory, est: &Trajectory, sink: &mut impl Write) -> Result<(), EvalError> {
    if gt.is_empty() || est.is_empty() {
        return Err(EvalError::EmptyTrajectory);
    }
    let pts = |t: &Trajectory| -> Vec<(f64, f64)> {
        t.poses().map(|p| (p.translation().x, p.translation().z)).collect()
    };
    let (g, e) = (pts(gt), pts(est));
    let (mut x0, mut x1, mut z0, mut z1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, z) in g.iter().chain(&e) {
        if !(x.is_finite() && z.is_finite()) {
            return Err(EvalError::NonFinite);
        }
        x0 = x0.min(x);
        x1 = x1.max(x);
        z0 = z0.min(z);
        z1 = z1.max(z);
    }
    let span = (x1 - x0).max(z1 - z0).max(1e-9);
    let scale = (SVG_SIZE - 2.0 * SVG_MARGIN) / span;
    let map = |(x, z): (f64, f64)| (SVG_MARGIN + (x - x0) * scale, SVG_SIZE - SVG_MARGIN - (z - z0) * scale);
    let polyline = |p: &[(f64, f64)]| {
        p.iter()
            .map(|&q| {
                let (u, v) = map(q);
                format!("{u:.3},{v:.3}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE}" height="{SVG_SIZE}" viewBox="0 0 {SVG_SIZE} {SVG_SIZE}">"#
    );
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    let _ = writeln!(
        s,
        r#"<polyline id="gt" fill="none" stroke="black" stroke-width="1.5" points="{}"/>"#,
        polyline(&g)
    );
    let _ = writeln!(
        s,
        r#"<polyline id="pred" fill="none" stroke="red" stroke-width="1.5" points="{}"/>"#,
        polyline(&e)
    );
    s.push_str(concat!(
        "<g font-family=\"sans-serif\" font-size=\"14\">\n",
        "<line x1=\"10\" y1=\"15\" x2=\"30\" y2=\"15\" stroke=\"black\" stroke-width=\"2\"/>",
        "<text x=\"35\" y=\"20\">gt</text>\n",
        "<line x1=\"10\" y1=\"35\" x2=\"30\" y2=\"35\" stroke=\"red\" stroke-width=\"2\"/>",
        "<text x=\"35\" y=\"40\">pred</text>\n",
        "</g>\n</svg>\n"
    ));
    sink.write_all(s.as_bytes())?;
    Ok(())
}

/// Equal-width bins over `[0, max]`; the maximum falls into the last bin.
/// Returns `(lower, upper, count)` per bin.
pub fn histogram(values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    let bins = bins.max(1);
    let max = values.iter().copied().fold(0.0f64, f64::max);
    let width = max / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let idx = if width > 0.0 {
            ((v.max(0.0) / width) as usize).min(bins - 1)
        } else {
            0
        };
        counts[idx] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (i as f64 * width, (i + 1) as f64 * width, c))
        .collect()
}

/// Writes `index,frame_id,distance` rows and a `bin,lower,upper,count` histogram.
pub fn emit_distance_profile(
    frame_ids: &[u64],
    distances: &[f64],
    bins: usize,
    curve: &mut impl Write,
    hist: &mut impl Write,
) -> Result<(), EvalError> {
    if distances.is_empty() || frame_ids.len() != distances.len() {
        return Err(EvalError::EmptyProfile);
    }
    let mut s = String::from("index,frame_id,distance\n");
    for (i, (id, d)) in frame_ids.iter().zip(distances).enumerate() {
        let _ = writeln!(s, "{i},{id},{d}");
    }
    curve.write_all(s.as_bytes())?;
    let mut s = String::from("bin,lower,upper,count\n");
    for (i, (lo, hi, c)) in histogram(distances, bins).into_iter().enumerate() {
        let _ = writeln!(s, "{i},{lo},{hi},{c}");
    }
    hist.write_all(s.as_bytes())?;
    Ok(())
}

impl From<io::Error> for EvalError {
    fn from(e: io::Error) -> Self {
        EvalError::Io(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_conserves_counts() {
        let v = [0.0, 0.1, 0.5, 0.99, 1.0, 1.0];
        let h = histogram(&v, 4);
        assert_eq!(h.iter().map(|b| b.2).sum::<usize>(), v.len());
        assert_eq!(h[3].2, 3);
        let flat = histogram(&[2.0; 5], 50);
        assert_eq!(flat.iter().filter(|b| b.2 > 0).count(), 1);
        let zeros = histogram(&[0.0; 3], 50);
        assert_eq!(zeros[0].2, 3);
    }
}
