//! Confusion counts, the five classification metrics, support-weighted
//! averages, ROC/AUC and baseline comparison.
//!
//! Metric values are fractions in `[0, 1]`; reports print percentages with
//! two decimals.

mod baseline;
mod roc;

pub use baseline::{compare_to_baseline, BaselineComparison, BaselineEntry, BaselineTable, MetricDelta};
pub use roc::{auc, macro_auc, macro_roc, micro_auc, micro_roc, roc_points, roc_to_csv, render_roc_svg, Averaging, RocCurve};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{Label, PredictionRecord};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction for {0:?} has no true label")]
    MissingLabel(String),
    #[error("cannot compute metrics from zero samples")]
    EmptyCounts,
    #[error("total support is zero")]
    ZeroSupport,
    #[error("ROC needs both outcomes for reference class {0}")]
    DegenerateLabels(Label),
    #[error("invalid ROC curve: {0}")]
    InvalidCurve(String),
    #[error("model {0:?} not found in baseline table")]
    UnknownModelName(String),
    #[error("baseline table: {0}")]
    InvalidBaseline(String),
}

/// The five reported metrics, in table column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    Precision,
    Sensitivity,
    F1,
    Specificity,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Accuracy,
        Metric::Precision,
        Metric::Sensitivity,
        Metric::F1,
        Metric::Specificity,
    ];

    pub fn title(self) -> &'static str {
        match self {
            Metric::Accuracy => "Accuracy",
            Metric::Precision => "Precision",
            Metric::Sensitivity => "Sensitivity",
            Metric::F1 => "F1 score",
            Metric::Specificity => "Specificity",
        }
    }
}

/// Decision rule applied to probability pairs: argmax, with exact ties
/// resolved to `tie_break`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRule {
    pub tie_break: Label,
}

impl Default for DecisionRule {
    fn default() -> Self {
        DecisionRule {
            tie_break: Label::Negative,
        }
    }
}

/// Confusion tallies with `reference` counted as the positive event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub reference: Label,
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(reference: Label, tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        ConfusionCounts {
            reference,
            tp,
            tn,
            fp,
            fn_,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// The same outcomes seen from the other class.
    pub fn swapped(&self) -> ConfusionCounts {
        ConfusionCounts {
            reference: self.reference.other(),
            tp: self.tn,
            tn: self.tp,
            fp: self.fn_,
            fn_: self.fp,
        }
    }
}

pub fn confusion(records: &[PredictionRecord], reference: Label) -> Result<ConfusionCounts, MetricsError> {
    confusion_with(records, reference, DecisionRule::default())
}

pub fn confusion_with(
    records: &[PredictionRecord],
    reference: Label,
    rule: DecisionRule,
) -> Result<ConfusionCounts, MetricsError> {
    let mut counts = ConfusionCounts::new(reference, 0, 0, 0, 0);
    for r in records {
        let truth = r
            .true_label
            .ok_or_else(|| MetricsError::MissingLabel(r.filename.clone()))?;
        let predicted = r.decide(rule.tie_break);
        match (predicted == reference, truth == reference) {
            (true, true) => counts.tp += 1,
            (false, false) => counts.tn += 1,
            (true, false) => counts.fp += 1,
            (false, true) => counts.fn_ += 1,
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub reference_class: Label,
    pub accuracy: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    /// Number of true samples of the reference class.
    pub support: u64,
    /// Metrics whose denominator was zero and were set to 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<Metric>,
}

impl ClassMetrics {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Accuracy => self.accuracy,
            Metric::Precision => self.precision,
            Metric::Sensitivity => self.sensitivity,
            Metric::F1 => self.f1,
            Metric::Specificity => self.specificity,
        }
    }
}

fn ratio(num: u64, den: u64, metric: Metric, undefined: &mut Vec<Metric>) -> f64 {
    if den == 0 {
        undefined.push(metric);
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, specificity, sensitivity, precision and F1 from one set of
/// counts. Zero denominators yield 0 and are listed in `undefined`.
pub fn class_metrics(counts: &ConfusionCounts) -> Result<ClassMetrics, MetricsError> {
    let ConfusionCounts { tp, tn, fp, fn_, .. } = *counts;
    let total = counts.total();
    if total == 0 {
        return Err(MetricsError::EmptyCounts);
    }
    let mut undefined = Vec::new();
    let accuracy = (tp + tn) as f64 / total as f64;
    let specificity = ratio(tn, tn + fp, Metric::Specificity, &mut undefined);
    let sensitivity = ratio(tp, tp + fn_, Metric::Sensitivity, &mut undefined);
    let precision = ratio(tp, tp + fp, Metric::Precision, &mut undefined);
    let f1 = if precision + sensitivity > 0.0 {
        2.0 * precision * sensitivity / (precision + sensitivity)
    } else {
        undefined.push(Metric::F1);
        0.0
    };
    Ok(ClassMetrics {
        reference_class: counts.reference,
        accuracy,
        precision,
        sensitivity,
        specificity,
        f1,
        support: tp + fn_,
        undefined,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub f1: f64,
    pub specificity: f64,
    pub support: u64,
}

impl WeightedMetrics {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Accuracy => self.accuracy,
            Metric::Precision => self.precision,
            Metric::Sensitivity => self.sensitivity,
            Metric::F1 => self.f1,
            Metric::Specificity => self.specificity,
        }
    }
}

/// Support-weighted mean of each metric over the given classes.
pub fn weighted_average(per_class: &[ClassMetrics]) -> Result<WeightedMetrics, MetricsError> {
    let support: u64 = per_class.iter().map(|m| m.support).sum();
    if support == 0 {
        return Err(MetricsError::ZeroSupport);
    }
    let avg = |metric: Metric| {
        per_class
            .iter()
            .map(|m| m.get(metric) * m.support as f64)
            .sum::<f64>()
            / support as f64
    };
    Ok(WeightedMetrics {
        accuracy: avg(Metric::Accuracy),
        precision: avg(Metric::Precision),
        sensitivity: avg(Metric::Sensitivity),
        f1: avg(Metric::F1),
        specificity: avg(Metric::Specificity),
        support,
    })
}

/// Three-row report: positive class, negative class, weighted average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryReport {
    pub positive: ClassMetrics,
    pub negative: ClassMetrics,
    pub weighted: WeightedMetrics,
    pub counts: ConfusionCounts,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<AucSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AucSummary {
    pub positive: f64,
    pub negative: f64,
    pub micro: f64,
    pub macro_: f64,
}

pub fn evaluate_binary(records: &[PredictionRecord]) -> Result<BinaryReport, MetricsError> {
    evaluate_binary_with(records, DecisionRule::default())
}

pub fn evaluate_binary_with(records: &[PredictionRecord], rule: DecisionRule) -> Result<BinaryReport, MetricsError> {
    let counts = confusion_with(records, Label::Positive, rule)?;
    let positive = class_metrics(&counts)?;
    let negative = class_metrics(&confusion_with(records, Label::Negative, rule)?)?;
    let weighted = weighted_average(&[positive.clone(), negative.clone()])?;
    let auc = match (
        roc_points(records, Label::Positive),
        roc_points(records, Label::Negative),
    ) {
        (Ok(p), Ok(n)) => Some(AucSummary {
            positive: auc(&p)?,
            negative: auc(&n)?,
            micro: micro_auc(records)?,
            macro_: macro_auc(records)?,
        }),
        _ => None,
    };
    Ok(BinaryReport {
        positive,
        negative,
        weighted,
        counts,
        auc,
    })
}

/// Which row of a report is compared against a single-row baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineBasis {
    #[default]
    Weighted,
    PositiveClass,
}

impl From<&ClassMetrics> for WeightedMetrics {
    fn from(m: &ClassMetrics) -> Self {
        WeightedMetrics {
            accuracy: m.accuracy,
            precision: m.precision,
            sensitivity: m.sensitivity,
            f1: m.f1,
            specificity: m.specificity,
            support: m.support,
        }
    }
}

impl BinaryReport {
    pub fn row(&self, basis: BaselineBasis) -> WeightedMetrics {
        match basis {
            BaselineBasis::Weighted => self.weighted.clone(),
            BaselineBasis::PositiveClass => WeightedMetrics::from(&self.positive),
        }
    }

    /// Aligned text table in percent.
    pub fn to_text(&self) -> String {
        let mut rows: Vec<(&str, [f64; 5])> = Vec::new();
        let pick = |f: &dyn Fn(Metric) -> f64| Metric::ALL.map(f);
        rows.push(("Positive", pick(&|m| self.positive.get(m))));
        rows.push(("Negative", pick(&|m| self.negative.get(m))));
        rows.push(("Weighted Average", pick(&|m| self.weighted.get(m))));
        let mut out = format_table(&rows);
        if let Some(a) = &self.auc {
            out.push_str(&format!(
                "AUC  positive {:.4}  negative {:.4}  micro {:.4}  macro {:.4}\n",
                a.positive, a.negative, a.micro, a.macro_
            ));
        }
        let undefined: Vec<String> = [&self.positive, &self.negative]
            .iter()
            .flat_map(|m| {
                m.undefined
                    .iter()
                    .map(move |u| format!("{} ({})", u.title(), m.reference_class))
            })
            .collect();
        if !undefined.is_empty() {
            out.push_str(&format!("warning: zero denominator, reported as 0: {}\n", undefined.join(", ")));
        }
        out
    }
}

/// Render rows of fractions as a percent table with the standard columns.
pub fn format_table(rows: &[(&str, [f64; 5])]) -> String {
    let name_width = rows.iter().map(|r| r.0.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:<name_width$}", "Class");
    for m in Metric::ALL {
        out.push_str(&format!("  {:>11}", m.title()));
    }
    out.push('\n');
    for (name, values) in rows {
        out.push_str(&format!("{name:<name_width$}"));
        for v in values {
            out.push_str(&format!("  {:>11.2}", v * 100.0));
        }
        out.push('\n');
    }
    out
}
