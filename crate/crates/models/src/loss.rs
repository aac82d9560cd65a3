//! Negative log-likelihood on log-probability matrices.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::graph::Reduction;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LossError {
    #[error("expected {rows} rows of {cols} log-probabilities and {rows} labels, got {values} values and {labels} labels")]
    ShapeMismatch {
        rows: usize,
        cols: usize,
        values: usize,
        labels: usize,
    },
    #[error("label {label} at row {row} is outside 0..{classes}")]
    LabelOutOfRange { row: usize, label: usize, classes: usize },
    #[error("empty batch")]
    Empty,
}

impl Serialize for Reduction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(match self {
            Reduction::Mean => "mean",
            Reduction::Sum => "sum",
        })
    }
}

impl<'de> Deserialize<'de> for Reduction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match String::deserialize(d)?.as_str() {
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            other => Err(serde::de::Error::custom(format!("unknown reduction `{other}`"))),
        }
    }
}

fn check(logprobs: &[f64], labels: &[usize], classes: usize) -> Result<(), LossError> {
    if labels.is_empty() {
        return Err(LossError::Empty);
    }
    if classes == 0 || logprobs.len() != labels.len() * classes {
        return Err(LossError::ShapeMismatch {
            rows: labels.len(),
            cols: classes,
            values: logprobs.len(),
            labels: labels.len(),
        });
    }
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(LossError::LabelOutOfRange { row, label, classes });
    }
    Ok(())
}

/// `-sum_i logprobs[i, labels[i]]`, divided by the batch size for
/// [`Reduction::Mean`]. `logprobs` is row-major with `classes` columns.
pub fn nll_loss(logprobs: &[f64], labels: &[usize], classes: usize, reduction: Reduction) -> Result<f64, LossError> {
    check(logprobs, labels, classes)?;
    let sum: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -logprobs[i * classes + y])
        .sum();
    Ok(match reduction {
        Reduction::Mean => sum / labels.len() as f64,
        Reduction::Sum => sum,
    })
}

/// Gradient of `nll_loss(log_softmax(logits))` with respect to the logits:
/// `(softmax - onehot)`, divided by the batch size under the mean.
pub fn log_softmax_nll_grad(
    logits: &[f64],
    labels: &[usize],
    classes: usize,
    reduction: Reduction,
) -> Result<Vec<f64>, LossError> {
    check(logits, labels, classes)?;
    let scale = match reduction {
        Reduction::Mean => 1.0 / labels.len() as f64,
        Reduction::Sum => 1.0,
    };
    let mut out = Vec::with_capacity(logits.len());
    for (row, &y) in logits.chunks(classes).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for (c, v) in row.iter().enumerate() {
            let p = (v - max).exp() / z;
            out.push((p - if c == y { 1.0 } else { 0.0 }) * scale);
        }
    }
    Ok(out)
}

/// Row-wise log-softmax in double precision.
pub fn log_softmax(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}
