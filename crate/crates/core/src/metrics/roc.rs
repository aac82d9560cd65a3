use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::{Label, PredictionRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    PerClass(Label),
    Micro,
    Macro,
}

/// ROC staircase from a threshold sweep. `points[i]` is the `(fpr, tpr)`
/// obtained when predicting the event for scores `>= thresholds[i]`. The
/// first threshold is `+inf` and yields `(0, 0)`; the last point is `(1, 1)`.
/// Macro curves carry no thresholds (`NaN`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
    pub thresholds: Vec<f64>,
    pub averaging: Averaging,
}

impl RocCurve {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let invalid = |m: &str| Err(MetricsError::InvalidCurve(m.to_string()));
        if self.points.len() < 2 || self.points.len() != self.thresholds.len() {
            return invalid("need at least two points and one threshold per point");
        }
        if self.points[0] != (0.0, 0.0) || *self.points.last().expect("non-empty") != (1.0, 1.0) {
            return invalid("curve must start at (0,0) and end at (1,1)");
        }
        for w in self.points.windows(2) {
            if w[1].0 < w[0].0 || w[1].1 < w[0].1 {
                return invalid("fpr and tpr must be nondecreasing");
            }
        }
        Ok(())
    }
}

/// Sweep over the distinct scores, highest first.
fn sweep(mut scored: Vec<(f64, bool)>, averaging: Averaging, reference: Label) -> Result<RocCurve, MetricsError> {
    let positives = scored.iter().filter(|s| s.1).count();
    let negatives = scored.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::DegenerateLabels(reference));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let threshold = scored[i].0;
        while i < scored.len() && scored[i].0 == threshold {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / negatives as f64, tp as f64 / positives as f64));
        thresholds.push(threshold);
    }
    Ok(RocCurve {
        points,
        thresholds,
        averaging,
    })
}

/// Per-class ROC with the probability of `reference` as the score.
pub fn roc_points(records: &[PredictionRecord], reference: Label) -> Result<RocCurve, MetricsError> {
    let scored = records
        .iter()
        .map(|r| {
            let truth = r
                .true_label
                .ok_or_else(|| MetricsError::MissingLabel(r.filename.clone()))?;
            Ok((r.probability(reference), truth == reference))
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    sweep(scored, Averaging::PerClass(reference), reference)
}

/// ROC over all (sample, class) decisions pooled together.
pub fn micro_roc(records: &[PredictionRecord]) -> Result<RocCurve, MetricsError> {
    let mut scored = Vec::with_capacity(records.len() * 2);
    for r in records {
        let truth = r
            .true_label
            .ok_or_else(|| MetricsError::MissingLabel(r.filename.clone()))?;
        for class in Label::ALL {
            scored.push((r.probability(class), truth == class));
        }
    }
    sweep(scored, Averaging::Micro, Label::Positive)
}

/// Mean of the per-class TPRs over the union of their FPR breakpoints.
pub fn macro_roc(records: &[PredictionRecord]) -> Result<RocCurve, MetricsError> {
    let curves = [
        roc_points(records, Label::Negative)?,
        roc_points(records, Label::Positive)?,
    ];
    let mut grid: Vec<f64> = curves.iter().flat_map(|c| c.points.iter().map(|p| p.0)).collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut points = Vec::with_capacity(grid.len() + 1);
    for &fpr in &grid {
        let lower = curves.iter().map(|c| tpr_at(c, fpr, false)).sum::<f64>() / curves.len() as f64;
        let upper = curves.iter().map(|c| tpr_at(c, fpr, true)).sum::<f64>() / curves.len() as f64;
        if points.last() != Some(&(fpr, lower)) {
            points.push((fpr, lower));
        }
        if upper != lower {
            points.push((fpr, upper));
        }
    }
    let thresholds = vec![f64::NAN; points.len()];
    Ok(RocCurve {
        points,
        thresholds,
        averaging: Averaging::Macro,
    })
}

/// TPR of a staircase at `fpr`, linearly interpolated along sloped segments.
/// On a vertical segment returns its bottom (`upper = false`) or top.
fn tpr_at(curve: &RocCurve, fpr: f64, upper: bool) -> f64 {
    let pts = &curve.points;
    let hits: Vec<f64> = pts.iter().filter(|p| p.0 == fpr).map(|p| p.1).collect();
    if !hits.is_empty() {
        return if upper {
            hits.iter().copied().fold(f64::MIN, f64::max)
        } else {
            hits.iter().copied().fold(f64::MAX, f64::min)
        };
    }
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 < fpr && fpr < x1 {
            return y0 + (y1 - y0) * (fpr - x0) / (x1 - x0);
        }
    }
    1.0
}

/// Trapezoidal area under a curve.
pub fn auc(curve: &RocCurve) -> Result<f64, MetricsError> {
    curve.validate()?;
    let area = curve
        .points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum::<f64>();
    Ok(area.clamp(0.0, 1.0))
}

pub fn micro_auc(records: &[PredictionRecord]) -> Result<f64, MetricsError> {
    auc(&micro_roc(records)?)
}

/// Unweighted mean of the two per-class AUCs.
pub fn macro_auc(records: &[PredictionRecord]) -> Result<f64, MetricsError> {
    let neg = auc(&roc_points(records, Label::Negative)?)?;
    let pos = auc(&roc_points(records, Label::Positive)?)?;
    Ok((neg + pos) / 2.0)
}

/// CSV with header `threshold,fpr,tpr`. Infinite thresholds print as `inf`,
/// absent ones as an empty field.
pub fn roc_to_csv(curve: &RocCurve) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for (&(fpr, tpr), &t) in curve.points.iter().zip(&curve.thresholds) {
        let threshold = if t.is_nan() {
            String::new()
        } else if t.is_infinite() {
            "inf".to_string()
        } else {
            format!("{t:.6}")
        };
        let _ = writeln!(out, "{threshold},{fpr:.6},{tpr:.6}");
    }
    out
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#e377c2", "#2ca02c", "#9467bd", "#ff7f0e"];

/// Standalone SVG plot of labelled curves with the chance diagonal.
pub fn render_roc_svg(curves: &[(&str, &RocCurve)], title: &str) -> String {
    let (w, h, m) = (480.0, 420.0, 50.0);
    let (pw, ph) = (w - 2.0 * m, h - 2.0 * m);
    let sx = |x: f64| m + x * pw;
    let sy = |y: f64| h - m - y * ph;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        xml_escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{m}" y="{m}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for k in 0..=5 {
        let v = f64::from(k) / 5.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.1}</text><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#,
            sx(v),
            h - m + 16.0,
            m - 6.0,
            sy(v) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">False Positive Rate</text>"#,
        w / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">True Positive Rate</text>"#,
        h / 2.0,
        h / 2.0
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="gray" stroke-dasharray="6 4"/>"#,
        sx(0.0),
        sy(0.0),
        sx(1.0),
        sy(1.0)
    );
    for (i, (name, curve)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = curve
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let dash = match curve.averaging {
            Averaging::Micro => r#" stroke-dasharray="8 4""#,
            Averaging::Macro => r#" stroke-dasharray="2 3""#,
            Averaging::PerClass(_) => "",
        };
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#,
            path.join(" ")
        );
        let area = auc(curve).map(|a| format!(" (AUC = {a:.2})")).unwrap_or_default();
        let ly = h - m - 12.0 - 16.0 * (curves.len() - 1 - i) as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"{dash}/><text x="{}" y="{}">{}{}</text>"#,
            w - m - 170.0,
            w - m - 150.0,
            w - m - 145.0,
            ly + 4.0,
            xml_escape(name),
            area
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
