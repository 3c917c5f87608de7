//! Comparison table in the layout of the published KITTI results.

use std::fmt::Write as _;
use std::io::Write;

use super::EvalError;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    /// Percent; `None` when not reported.
    pub translation: Option<f64>,
    /// Degrees per metre.
    pub rotation: Option<f64>,
    /// Seconds per frame.
    pub runtime: Option<f64>,
    pub environment: String,
}

impl ReportRow {
    pub fn new(
        method: &str,
        translation: Option<f64>,
        rotation: Option<f64>,
        runtime: Option<f64>,
        environment: &str,
    ) -> Self {
        Self {
            method: method.into(),
            translation,
            rotation,
            runtime,
            environment: environment.into(),
        }
    }
}

/// Published rows, reproduced verbatim.
pub fn bundled_baselines() -> Vec<ReportRow> {
    let row = ReportRow::new;
    vec![
        row("ORB-SLAM 2*", Some(1.15), Some(0.0027), Some(0.06), "2 CPU cores @ >3.5 GHz"),
        row("ESVO*", Some(1.42), Some(0.0048), Some(1.0), "1 CPU core @ 2.5 GHz"),
        row("D3VO", Some(0.88), Some(0.0021), Some(0.1), "1 CPU core @ 2.5 GHz"),
        row("GenPa-SLAM", Some(3.48), Some(0.121), Some(0.1), "GPU @ 2.5 GHz"),
        row("Deep-AVO", Some(4.1), Some(0.0125), Some(0.01), "GPU @ 3.0 GHz"),
        row("CUDA-Ego-Motion", Some(4.36), Some(0.0052), Some(0.001), "GPU @ 2.5 GHz"),
        row("D3DLO", Some(5.4), Some(0.0154), Some(0.1), "GPU @ 2.5 GHz"),
        row("Ours (w/ OF)", Some(4.4016), Some(0.0176), Some(0.27), "GPU @ 2.8 GHz"),
        row("Ours (w/o OF)", None, None, Some(0.006), "GPU @ 2.8 GHz"),
    ]
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Tab-separated rows (`method, translation, rotation, runtime, environment`)
/// with a header line; absent values are empty fields.
pub fn table1_tsv(measured: &[ReportRow]) -> String {
    let mut s = String::from("method\ttranslation_pct\trotation_deg_per_m\truntime_s\tenvironment\n");
    for r in bundled_baselines().iter().chain(measured) {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            r.method,
            cell(r.translation),
            cell(r.rotation),
            cell(r.runtime),
            r.environment
        );
    }
    s
}

/// Renders the bundled rows followed by `measured` as an aligned text table.
/// `note` (for example a non-standard length set) is printed above the table.
pub fn table1_report(measured: &[ReportRow], note: Option<&str>, sink: &mut impl Write) -> Result<(), EvalError> {
    let header = [
        "Method",
        "Translation [%] ↓",
        "Rotation [deg/m] ↓",
        "Runtime [s] ↓",
        "Environment",
    ];
    let dash = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
    let baselines = bundled_baselines();
    let rows: Vec<[String; 5]> = baselines
        .iter()
        .chain(measured)
        .map(|r| {
            [
                r.method.clone(),
                dash(r.translation),
                dash(r.rotation),
                dash(r.runtime),
                r.environment.clone(),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut s = String::new();
    if let Some(note) = note {
        let _ = writeln!(s, "# {note}");
    }
    s.push_str(&line(&header.map(String::from)));
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    s.push_str(&format!("|-{}-|\n", rule.join("-|-")));
    for (i, r) in rows.iter().enumerate() {
        if i == baselines.len() && !measured.is_empty() {
            s.push_str(&format!("|-{}-|\n", rule.join("-|-")));
        }
        s.push_str(&line(r));
    }
    sink.write_all(s.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_without_measured_rows() {
        let mut out = Vec::new();
        table1_report(&[], None, &mut out).unwrap();
        let s = String::from_utf8(out).unwrap();
        assert_eq!(s.lines().count(), 2 + bundled_baselines().len());
        assert!(s.contains("| ORB-SLAM 2*"));
        assert!(s.contains("0.0027"));
    }

    #[test]
    fn measured_rows_follow_baselines() {
        let m = ReportRow::new("synthetic", Some(1.5), Some(0.01), None, "1 CPU core");
        let tsv = table1_tsv(&[m]);
        assert!(tsv.ends_with("synthetic\t1.5\t0.01\t\t1 CPU core\n"));
        assert!(tsv.contains("Ours (w/o OF)\t\t\t0.006\tGPU @ 2.8 GHz\n"));
    }
}
