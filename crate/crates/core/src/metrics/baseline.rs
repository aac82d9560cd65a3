use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Metric, MetricsError, WeightedMetrics};

/// One published row, values in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineEntry {
    pub model: String,
    pub table: String,
    pub accuracy: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub f1: f64,
    pub specificity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl BaselineEntry {
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

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BaselineFile {
    entries: Vec<BaselineEntry>,
}

/// Read-only table of published results loaded from a data file.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineTable {
    entries: Vec<BaselineEntry>,
}

const BUNDLED: &str = include_str!("../../data/baselines.json");

impl BaselineTable {
    /// The table shipped with the crate (`data/baselines.json`).
    pub fn bundled() -> BaselineTable {
        BaselineTable::from_json_str(BUNDLED).expect("bundled baseline file is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<BaselineTable, MetricsError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| MetricsError::InvalidBaseline(format!("{}: {e}", path.display())))?;
        BaselineTable::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<BaselineTable, MetricsError> {
        let file: BaselineFile =
            serde_json::from_str(text).map_err(|e| MetricsError::InvalidBaseline(e.to_string()))?;
        let mut names = HashSet::new();
        for e in &file.entries {
            if !names.insert(e.model.as_str()) {
                return Err(MetricsError::InvalidBaseline(format!("duplicate model {:?}", e.model)));
            }
            for m in Metric::ALL {
                let v = e.get(m);
                if !(0.0..=100.0).contains(&v) {
                    return Err(MetricsError::InvalidBaseline(format!(
                        "{}: {} = {v} is not a percentage",
                        e.model,
                        m.title()
                    )));
                }
            }
        }
        Ok(BaselineTable { entries: file.entries })
    }

    pub fn entries(&self) -> &[BaselineEntry] {
        &self.entries
    }

    pub fn get(&self, model: &str) -> Option<&BaselineEntry> {
        self.entries.iter().find(|e| e.model == model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub metric: Metric,
    pub computed_pct: f64,
    pub baseline_pct: f64,
    pub delta_pp: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineComparison {
    pub model: String,
    pub table: String,
    pub tolerance_pp: f64,
    pub deltas: Vec<MetricDelta>,
    pub pass: bool,
}

impl BaselineComparison {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "baseline {} (table {}), tolerance {:.2} pp\n",
            self.model, self.table, self.tolerance_pp
        );
        for d in &self.deltas {
            out.push_str(&format!(
                "  {:<12} computed {:>6.2}  baseline {:>6.2}  delta {:>+7.2}  {}\n",
                d.metric.title(),
                d.computed_pct,
                d.baseline_pct,
                d.delta_pp,
                if d.pass { "ok" } else { "FAIL" }
            ));
        }
        out.push_str(if self.pass { "result: pass\n" } else { "result: fail\n" });
        out
    }
}

/// Per-metric difference `computed - baseline` in percentage points.
pub fn compare_to_baseline(
    computed: &WeightedMetrics,
    baseline: &BaselineTable,
    model_name: &str,
    tolerance_pp: f64,
) -> Result<BaselineComparison, MetricsError> {
    let entry = baseline
        .get(model_name)
        .ok_or_else(|| MetricsError::UnknownModelName(model_name.to_string()))?;
    let deltas: Vec<MetricDelta> = Metric::ALL
        .iter()
        .map(|&metric| {
            let computed_pct = computed.get(metric) * 100.0;
            let baseline_pct = entry.get(metric);
            let delta_pp = computed_pct - baseline_pct;
            // Slack for the percent conversion of values that match exactly.
            let pass = delta_pp.abs() <= tolerance_pp + 1e-9;
            MetricDelta {
                metric,
                computed_pct,
                baseline_pct,
                delta_pp,
                pass,
            }
        })
        .collect();
    Ok(BaselineComparison {
        model: model_name.to_string(),
        table: entry.table.clone(),
        tolerance_pp,
        pass: deltas.iter().all(|d| d.pass),
        deltas,
    })
}
