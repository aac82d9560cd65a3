//! Per-image class probabilities and the prediction CSV format.
//!
//! The file layout is fixed: header `filename,p_negative,p_positive` with an
//! optional trailing `true_label` column, `\n` line endings, probabilities
//! with six decimals and rows sorted ascending by filename. Writing, reading
//! and writing again is byte-identical.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Label;

/// Tolerance on `p_negative + p_positive = 1`.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

const HEADER: [&str; 3] = ["filename", "p_negative", "p_positive"];
const LABEL_COLUMN: &str = "true_label";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub filename: String,
    pub p_negative: f64,
    pub p_positive: f64,
    pub true_label: Option<Label>,
}

impl PredictionRecord {
    pub fn new(filename: impl Into<String>, p_negative: f64, p_positive: f64) -> Self {
        PredictionRecord {
            filename: filename.into(),
            p_negative,
            p_positive,
            true_label: None,
        }
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.true_label = Some(label);
        self
    }

    pub fn probability(&self, label: Label) -> f64 {
        match label {
            Label::Negative => self.p_negative,
            Label::Positive => self.p_positive,
        }
    }

    /// Argmax decision; an exact tie resolves to `tie_break`.
    pub fn decide(&self, tie_break: Label) -> Label {
        if self.p_positive > self.p_negative {
            Label::Positive
        } else if self.p_negative > self.p_positive {
            Label::Negative
        } else {
            tie_break
        }
    }

    pub fn is_normalized(&self) -> bool {
        self.p_negative.is_finite()
            && self.p_positive.is_finite()
            && (0.0..=1.0).contains(&self.p_negative)
            && (0.0..=1.0).contains(&self.p_positive)
            && (self.p_negative + self.p_positive - 1.0).abs() <= NORMALIZATION_TOLERANCE + 1e-12
    }
}

#[derive(Debug, Error)]
pub enum PredictionError {
    #[error("malformed prediction file at row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("row {row} ({filename}): probabilities sum to {sum}, expected 1")]
    NormalizationViolation {
        row: usize,
        filename: String,
        sum: f64,
    },
    #[error("duplicate filename {filename:?} at row {row}")]
    DuplicateFilename { row: usize, filename: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

/// Six-decimal fixed-point rendering of a probability pair. `p_negative` is
/// derived from the rounded `p_positive` so the printed pair sums to exactly
/// one.
fn format_pair(p_negative: f64, p_positive: f64) -> (String, String) {
    let total = p_negative + p_positive;
    let pos = if total > 0.0 { p_positive / total } else { 0.5 };
    let micro_pos = (pos * 1e6).round().clamp(0.0, 1e6) as i64;
    let micro_neg = 1_000_000 - micro_pos;
    let fmt = |micro: i64| format!("{}.{:06}", micro / 1_000_000, micro % 1_000_000);
    (fmt(micro_neg), fmt(micro_pos))
}

/// Serialize records in the canonical CSV format. Rows are sorted by
/// filename; the `true_label` column is present when any record has a label.
pub fn to_csv_string(records: &[PredictionRecord]) -> String {
    let mut sorted: Vec<&PredictionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.filename.cmp(&b.filename));
    let with_labels = records.iter().any(|r| r.true_label.is_some());

    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let mut header: Vec<&str> = HEADER.to_vec();
    if with_labels {
        header.push(LABEL_COLUMN);
    }
    // Writing into a Vec cannot fail.
    writer.write_record(&header).expect("in-memory write");
    for record in sorted {
        let (neg, pos) = format_pair(record.p_negative, record.p_positive);
        let mut row = vec![record.filename.clone(), neg, pos];
        if with_labels {
            row.push(
                record
                    .true_label
                    .map(|l| (l as u8).to_string())
                    .unwrap_or_default(),
            );
        }
        writer.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8 output")
}

pub fn write_prediction_file(
    path: impl AsRef<Path>,
    records: &[PredictionRecord],
) -> Result<(), PredictionError> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|source| PredictionError::Io {
                path: parent.display().to_string(),
                source,
            })?;
        }
    }
    fs::write(path, to_csv_string(records)).map_err(|source| PredictionError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parse the canonical CSV format. Row numbers in errors are 1-based and
/// count the header as row 1.
pub fn parse_csv(text: &str) -> Result<Vec<PredictionRecord>, PredictionError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut rows = reader.records();

    let header = match rows.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => {
            return Err(PredictionError::MalformedRow {
                row: 1,
                reason: e.to_string(),
            })
        }
        None => {
            return Err(PredictionError::MalformedRow {
                row: 1,
                reason: "missing header".into(),
            })
        }
    };
    let columns: Vec<&str> = header.iter().collect();
    let with_labels = match columns.as_slice() {
        [a, b, c] if [*a, *b, *c] == HEADER => false,
        [a, b, c, d] if [*a, *b, *c] == HEADER && *d == LABEL_COLUMN => true,
        _ => {
            return Err(PredictionError::MalformedRow {
                row: 1,
                reason: format!(
                    "header must be `filename,p_negative,p_positive[,true_label]`, got `{}`",
                    columns.join(",")
                ),
            })
        }
    };
    let width = if with_labels { 4 } else { 3 };

    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (offset, row) in rows.enumerate() {
        let row_no = offset + 2;
        let row = row.map_err(|e| PredictionError::MalformedRow {
            row: row_no,
            reason: e.to_string(),
        })?;
        if row.len() != width {
            return Err(PredictionError::MalformedRow {
                row: row_no,
                reason: format!("expected {width} fields, found {}", row.len()),
            });
        }
        let filename = row[0].to_string();
        if filename.is_empty() {
            return Err(PredictionError::MalformedRow {
                row: row_no,
                reason: "empty filename".into(),
            });
        }
        let parse_prob = |field: &str, name: &str| -> Result<f64, PredictionError> {
            field
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| PredictionError::MalformedRow {
                    row: row_no,
                    reason: format!("{name} is not a finite number: {field:?}"),
                })
        };
        let p_negative = parse_prob(&row[1], "p_negative")?;
        let p_positive = parse_prob(&row[2], "p_positive")?;
        let true_label = if with_labels && !row[3].is_empty() {
            Some(
                row[3]
                    .parse::<Label>()
                    .map_err(|reason| PredictionError::MalformedRow { row: row_no, reason })?,
            )
        } else {
            None
        };
        let record = PredictionRecord {
            filename,
            p_negative,
            p_positive,
            true_label,
        };
        if !record.is_normalized() {
            return Err(PredictionError::NormalizationViolation {
                row: row_no,
                filename: record.filename,
                sum: p_negative + p_positive,
            });
        }
        if !seen.insert(record.filename.clone()) {
            return Err(PredictionError::DuplicateFilename {
                row: row_no,
                filename: record.filename,
            });
        }
        records.push(record);
    }
    Ok(records)
}

pub fn read_prediction_file(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>, PredictionError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| PredictionError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_sorted_rows_with_six_decimals() {
        let records = vec![
            PredictionRecord::new("b.png", 0.25, 0.75).with_label(Label::Positive),
            PredictionRecord::new("a.png", 0.9, 0.1).with_label(Label::Negative),
        ];
        let text = to_csv_string(&records);
        assert_eq!(
            text,
            "filename,p_negative,p_positive,true_label\n\
             a.png,0.900000,0.100000,0\n\
             b.png,0.250000,0.750000,1\n"
        );
    }

    #[test]
    fn label_column_is_optional() {
        let text = to_csv_string(&[PredictionRecord::new("x", 0.5, 0.5)]);
        assert_eq!(text, "filename,p_negative,p_positive\nx,0.500000,0.500000\n");
        let parsed = parse_csv(&text).unwrap();
        assert_eq!(parsed[0].true_label, None);
    }

    #[test]
    fn printed_pair_sums_to_one() {
        let text = to_csv_string(&[PredictionRecord::new("x", 1.0 / 3.0, 2.0 / 3.0)]);
        assert!(text.ends_with("x,0.333333,0.666667\n"));
    }

    #[test]
    fn rejects_unnormalized_rows() {
        let err = parse_csv("filename,p_negative,p_positive\na,0.3,0.4\n").unwrap_err();
        assert!(matches!(err, PredictionError::NormalizationViolation { row: 2, .. }));
    }

    #[test]
    fn rejects_unknown_columns() {
        let err = parse_csv("filename,p_negative,p_positive,extra\na,0.5,0.5,1\n").unwrap_err();
        match err {
            PredictionError::MalformedRow { row, reason } => {
                assert_eq!(row, 1);
                assert!(reason.contains("extra"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn reports_row_numbers() {
        let text = "filename,p_negative,p_positive\na,0.5,0.5\nb,zero,1\n";
        match parse_csv(text).unwrap_err() {
            PredictionError::MalformedRow { row, .. } => assert_eq!(row, 3),
            other => panic!("unexpected {other:?}"),
        }
        let text = "filename,p_negative,p_positive\na,0.5\n";
        assert!(matches!(
            parse_csv(text).unwrap_err(),
            PredictionError::MalformedRow { row: 2, .. }
        ));
    }

    #[test]
    fn rejects_duplicates_and_bad_labels() {
        let dup = "filename,p_negative,p_positive\na,0.5,0.5\na,0.5,0.5\n";
        assert!(matches!(
            parse_csv(dup).unwrap_err(),
            PredictionError::DuplicateFilename { row: 3, .. }
        ));
        let bad = "filename,p_negative,p_positive,true_label\na,0.5,0.5,2\n";
        assert!(matches!(
            parse_csv(bad).unwrap_err(),
            PredictionError::MalformedRow { row: 2, .. }
        ));
    }

    #[test]
    fn tie_break_applies_only_on_exact_ties() {
        let r = PredictionRecord::new("a", 0.5, 0.5);
        assert_eq!(r.decide(Label::Negative), Label::Negative);
        assert_eq!(r.decide(Label::Positive), Label::Positive);
        let r = PredictionRecord::new("a", 0.49, 0.51);
        assert_eq!(r.decide(Label::Negative), Label::Positive);
    }
}
