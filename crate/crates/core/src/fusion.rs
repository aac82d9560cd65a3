//! Late fusion: align per-model prediction files by filename and average
//! their class probabilities.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::{evaluate_binary, BinaryReport, MetricsError};
use crate::predictions::{read_prediction_file, PredictionError};
use crate::{Label, PredictionRecord};

/// Drift beyond which a fused pair is renormalized.
pub const RENORMALIZE_DRIFT: f64 = 1e-9;

/// Model names of the three-file recipe: the parallel ensemble and its two
/// member architectures trained standalone.
pub const THREE_MODEL_PRESET: [&str; 3] = ["parallel_ensemble", "mobilevit_xs", "vit_tiny_r_s16_p8_224"];

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("fusion needs at least 2 inputs, got {0}")]
    TooFewInputs(usize),
    #[error("{files} prediction lists but {names} model names")]
    NameCountMismatch { files: usize, names: usize },
    #[error("model name {0:?} given twice")]
    DuplicateModelName(String),
    #[error("model {model}: filename {filename:?} appears twice")]
    DuplicateFilename { model: String, filename: String },
    #[error(
        "filename sets differ between {reference} and {other}: only in {reference}: {only_in_reference:?}; only in {other}: {only_in_other:?}"
    )]
    FilenameMismatch {
        reference: String,
        other: String,
        only_in_reference: Vec<String>,
        only_in_other: Vec<String>,
    },
    #[error("{filename}: true label {label_a} in {model_a} but {label_b} in {model_b}")]
    LabelConflict {
        filename: String,
        model_a: String,
        label_a: Label,
        model_b: String,
        label_b: Label,
    },
    #[error("no filename is shared by all inputs")]
    EmptyIntersection,
    #[error(transparent)]
    Prediction(#[from] PredictionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignOptions {
    /// Keep only filenames present in every input instead of failing.
    pub allow_intersection: bool,
}

/// Per-model probability pairs on a common, sorted filename index.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPredictions {
    pub filenames: Vec<String>,
    pub model_names: Vec<String>,
    /// `per_model[m][i]` is `(p_negative, p_positive)` of model `m` for
    /// `filenames[i]`.
    pub per_model: Vec<Vec<(f64, f64)>>,
    pub labels: Vec<Option<Label>>,
    /// Filenames removed by an intersection join, sorted.
    pub dropped: Vec<String>,
}

impl AlignedPredictions {
    pub fn len(&self) -> usize {
        self.filenames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filenames.is_empty()
    }

    pub fn model(&self, name: &str) -> Option<&[(f64, f64)]> {
        self.model_names
            .iter()
            .position(|n| n == name)
            .map(|i| self.per_model[i].as_slice())
    }
}

pub fn load_prediction_file(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>, FusionError> {
    Ok(read_prediction_file(path)?)
}

pub fn align(
    files: &[Vec<PredictionRecord>],
    model_names: &[String],
    options: AlignOptions,
) -> Result<AlignedPredictions, FusionError> {
    if files.len() != model_names.len() {
        return Err(FusionError::NameCountMismatch {
            files: files.len(),
            names: model_names.len(),
        });
    }
    if files.len() < 2 {
        return Err(FusionError::TooFewInputs(files.len()));
    }
    let mut seen = BTreeSet::new();
    for name in model_names {
        if !seen.insert(name.as_str()) {
            return Err(FusionError::DuplicateModelName(name.clone()));
        }
    }

    let mut indexed: Vec<BTreeMap<&str, &PredictionRecord>> = Vec::with_capacity(files.len());
    for (records, model) in files.iter().zip(model_names) {
        let mut map = BTreeMap::new();
        for r in records {
            if map.insert(r.filename.as_str(), r).is_some() {
                return Err(FusionError::DuplicateFilename {
                    model: model.clone(),
                    filename: r.filename.clone(),
                });
            }
        }
        indexed.push(map);
    }

    let union: BTreeSet<&str> = indexed.iter().flat_map(|m| m.keys().copied()).collect();
    let common: Vec<&str> = union
        .iter()
        .copied()
        .filter(|f| indexed.iter().all(|m| m.contains_key(f)))
        .collect();
    let dropped: Vec<String> = if common.len() == union.len() {
        Vec::new()
    } else if options.allow_intersection {
        union
            .iter()
            .filter(|f| !indexed.iter().all(|m| m.contains_key(*f)))
            .map(|f| f.to_string())
            .collect()
    } else {
        let reference = &indexed[0];
        let (k, other) = indexed
            .iter()
            .enumerate()
            .skip(1)
            .find(|(_, m)| m.len() != reference.len() || m.keys().any(|f| !reference.contains_key(f)))
            .expect("some input differs from the first");
        return Err(FusionError::FilenameMismatch {
            reference: model_names[0].clone(),
            other: model_names[k].clone(),
            only_in_reference: reference
                .keys()
                .filter(|f| !other.contains_key(*f))
                .map(|f| f.to_string())
                .collect(),
            only_in_other: other
                .keys()
                .filter(|f| !reference.contains_key(*f))
                .map(|f| f.to_string())
                .collect(),
        });
    };
    if common.is_empty() {
        return Err(FusionError::EmptyIntersection);
    }

    let mut labels = Vec::with_capacity(common.len());
    for f in &common {
        let mut label: Option<(Label, usize)> = None;
        for (m, map) in indexed.iter().enumerate() {
            let Some(l) = map[f].true_label else { continue };
            match label {
                None => label = Some((l, m)),
                Some((first, fm)) if first != l => {
                    return Err(FusionError::LabelConflict {
                        filename: f.to_string(),
                        model_a: model_names[fm].clone(),
                        label_a: first,
                        model_b: model_names[m].clone(),
                        label_b: l,
                    })
                }
                Some(_) => {}
            }
        }
        labels.push(label.map(|(l, _)| l));
    }

    let per_model = indexed
        .iter()
        .map(|map| common.iter().map(|f| (map[f].p_negative, map[f].p_positive)).collect())
        .collect();
    Ok(AlignedPredictions {
        filenames: common.iter().map(|f| f.to_string()).collect(),
        model_names: model_names.to_vec(),
        per_model,
        labels,
        dropped,
    })
}

/// Mean of values summed in ascending order, so the result does not depend
/// on input order, then clamped into the input range against rounding.
fn order_free_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    mean.clamp(values[0], values[values.len() - 1])
}

/// Unweighted per-class mean over models.
pub fn average_fuse(aligned: &AlignedPredictions) -> Vec<PredictionRecord> {
    let k = aligned.per_model.len();
    let mut neg = vec![0.0; k];
    let mut pos = vec![0.0; k];
    aligned
        .filenames
        .iter()
        .enumerate()
        .map(|(i, filename)| {
            for (m, list) in aligned.per_model.iter().enumerate() {
                neg[m] = list[i].0;
                pos[m] = list[i].1;
            }
            let (lo_n, hi_n) = range(&neg);
            let (lo_p, hi_p) = range(&pos);
            let mut p_negative = order_free_mean(&mut neg);
            let mut p_positive = order_free_mean(&mut pos);
            let total = p_negative + p_positive;
            if (total - 1.0).abs() > RENORMALIZE_DRIFT && total > 0.0 {
                p_negative = (p_negative / total).clamp(lo_n, hi_n);
                p_positive = (p_positive / total).clamp(lo_p, hi_p);
            }
            PredictionRecord {
                filename: filename.clone(),
                p_negative,
                p_positive,
                true_label: aligned.labels[i],
            }
        })
        .collect()
}

fn range(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Positive, negative and weighted-average rows of the fused predictions.
pub fn evaluate_fused(fused: &[PredictionRecord]) -> Result<BinaryReport, FusionError> {
    Ok(evaluate_binary(fused)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionInput {
    pub model: String,
    pub path: PathBuf,
    pub rows: usize,
    pub sha256: String,
}

/// Provenance record written next to a fused prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionManifest {
    pub method: String,
    pub inputs: Vec<FusionInput>,
    pub output: PathBuf,
    pub rows: usize,
    pub allow_intersection: bool,
    pub dropped: Vec<String>,
}

impl FusionManifest {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        text
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Result of fusing prediction files from disk.
#[derive(Debug, Clone)]
pub struct FusedFiles {
    pub aligned: AlignedPredictions,
    pub fused: Vec<PredictionRecord>,
    pub inputs: Vec<FusionInput>,
}

impl FusedFiles {
    pub fn manifest(&self, output: &Path, options: AlignOptions) -> FusionManifest {
        FusionManifest {
            method: "mean".to_string(),
            inputs: self.inputs.clone(),
            output: output.to_path_buf(),
            rows: self.fused.len(),
            allow_intersection: options.allow_intersection,
            dropped: self.aligned.dropped.clone(),
        }
    }
}

/// Load, align and average prediction files.
pub fn fuse_files(
    paths: &[PathBuf],
    model_names: &[String],
    options: AlignOptions,
) -> Result<FusedFiles, FusionError> {
    if paths.len() < 2 {
        return Err(FusionError::TooFewInputs(paths.len()));
    }
    let mut files = Vec::with_capacity(paths.len());
    let mut inputs = Vec::with_capacity(paths.len());
    for (path, model) in paths.iter().zip(model_names) {
        let bytes = std::fs::read(path).map_err(|source| PredictionError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let text = String::from_utf8_lossy(&bytes);
        let records = crate::predictions::parse_csv(&text)?;
        inputs.push(FusionInput {
            model: model.clone(),
            path: path.clone(),
            rows: records.len(),
            sha256: sha256_hex(&bytes),
        });
        files.push(records);
    }
    let aligned = align(&files, model_names, options)?;
    let fused = average_fuse(&aligned);
    Ok(FusedFiles { aligned, fused, inputs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("m{i}")).collect()
    }

    fn file(rows: &[(&str, f64)]) -> Vec<PredictionRecord> {
        rows.iter()
            .map(|&(f, p)| PredictionRecord::new(f, 1.0 - p, p))
            .collect()
    }

    #[test]
    fn two_model_mean() {
        let a = vec![PredictionRecord::new("x", 0.6, 0.4)];
        let b = vec![PredictionRecord::new("x", 0.8, 0.2)];
        let aligned = align(&[a, b], &names(2), AlignOptions::default()).unwrap();
        let fused = average_fuse(&aligned);
        assert_eq!(fused[0].p_negative, 0.7);
        assert!((fused[0].p_positive - 0.3).abs() <= 1e-15);
        assert_eq!(crate::predictions::to_csv_string(&fused), "filename,p_negative,p_positive\nx,0.700000,0.300000\n");
    }

    #[test]
    fn three_model_mean() {
        let files = vec![
            vec![PredictionRecord::new("x", 0.9, 0.1)],
            vec![PredictionRecord::new("x", 0.6, 0.4)],
            vec![PredictionRecord::new("x", 0.3, 0.7)],
        ];
        let fused = average_fuse(&align(&files, &names(3), AlignOptions::default()).unwrap());
        assert!((fused[0].p_negative - 0.6).abs() < 1e-15);
        assert!((fused[0].p_positive - 0.4).abs() < 1e-15);
    }

    #[test]
    fn identical_models_are_idempotent() {
        let f = file(&[("a", 0.1), ("b", 0.37), ("c", 0.999)]);
        let aligned = align(&[f.clone(), f.clone(), f.clone()], &names(3), AlignOptions::default()).unwrap();
        assert_eq!(average_fuse(&aligned), f);
    }

    #[test]
    fn aligned_table_shape() {
        let rows = [("a", 0.1), ("b", 0.2), ("c", 0.3), ("d", 0.4), ("e", 0.5)];
        let aligned = align(&[file(&rows), file(&rows), file(&rows)], &names(3), AlignOptions::default()).unwrap();
        assert_eq!(aligned.len(), 5);
        assert_eq!(aligned.per_model.len(), 3);
        assert!(aligned.per_model.iter().all(|m| m.len() == 5));
    }

    #[test]
    fn missing_filename_is_reported() {
        let full = file(&[("a", 0.1), ("b", 0.2), ("c", 0.3)]);
        let short = file(&[("a", 0.1), ("c", 0.3)]);
        let err = align(&[full.clone(), short.clone()], &names(2), AlignOptions::default()).unwrap_err();
        match err {
            FusionError::FilenameMismatch {
                only_in_reference,
                only_in_other,
                ..
            } => {
                assert_eq!(only_in_reference, vec!["b".to_string()]);
                assert!(only_in_other.is_empty());
            }
            other => panic!("{other:?}"),
        }
        let aligned = align(&[full, short], &names(2), AlignOptions { allow_intersection: true }).unwrap();
        assert_eq!(aligned.filenames, vec!["a", "c"]);
        assert_eq!(aligned.dropped, vec!["b"]);
    }

    #[test]
    fn label_conflict_names_both_models() {
        let a = vec![PredictionRecord::new("x", 0.5, 0.5).with_label(Label::Positive)];
        let b = vec![PredictionRecord::new("x", 0.5, 0.5).with_label(Label::Negative)];
        match align(&[a, b], &names(2), AlignOptions::default()).unwrap_err() {
            FusionError::LabelConflict { model_a, model_b, .. } => assert_eq!((model_a.as_str(), model_b.as_str()), ("m0", "m1")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn labels_from_any_file() {
        let a = vec![PredictionRecord::new("x", 0.2, 0.8)];
        let b = vec![PredictionRecord::new("x", 0.4, 0.6).with_label(Label::Positive)];
        let aligned = align(&[a, b], &names(2), AlignOptions::default()).unwrap();
        assert_eq!(aligned.labels, vec![Some(Label::Positive)]);
    }

    #[test]
    fn guards() {
        let f = file(&[("a", 0.1)]);
        assert!(matches!(
            align(&[f.clone()], &names(1), AlignOptions::default()),
            Err(FusionError::TooFewInputs(1))
        ));
        assert!(matches!(
            align(&[f.clone(), f.clone()], &["m".into(), "m".into()], AlignOptions::default()),
            Err(FusionError::DuplicateModelName(_))
        ));
        let dup = file(&[("a", 0.1), ("a", 0.2)]);
        assert!(matches!(
            align(&[f, dup], &names(2), AlignOptions::default()),
            Err(FusionError::DuplicateFilename { .. })
        ));
    }

    #[test]
    fn perfect_and_inverted_evaluation() {
        let perfect = vec![
            PredictionRecord::new("a", 0.1, 0.9).with_label(Label::Positive),
            PredictionRecord::new("b", 0.8, 0.2).with_label(Label::Negative),
        ];
        let report = evaluate_fused(&perfect).unwrap();
        assert_eq!(report.weighted.accuracy, 1.0);
        assert_eq!(report.weighted.f1, 1.0);
        let inverted: Vec<_> = perfect
            .iter()
            .map(|r| PredictionRecord {
                p_negative: r.p_positive,
                p_positive: r.p_negative,
                ..r.clone()
            })
            .collect();
        let report = evaluate_fused(&inverted).unwrap();
        assert_eq!(report.weighted.accuracy, 0.0);
        assert_eq!(report.positive.sensitivity, 0.0);
    }

    #[test]
    fn files_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut paths = Vec::new();
        for (i, p) in [0.2, 0.4, 0.9].iter().enumerate() {
            let path = dir.path().join(format!("m{i}.csv"));
            crate::predictions::write_prediction_file(&path, &file(&[("a", *p), ("b", 1.0 - p)])).unwrap();
            paths.push(path);
        }
        let out = fuse_files(&paths, &names(3), AlignOptions::default()).unwrap();
        assert_eq!(out.fused.len(), 2);
        let manifest = out.manifest(&dir.path().join("fused.csv"), AlignOptions::default());
        let v: serde_json::Value = serde_json::from_str(&manifest.to_json()).unwrap();
        assert_eq!(v["inputs"].as_array().unwrap().len(), 3);
        assert_eq!(v["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
        assert_eq!(v["method"], "mean");
    }
}
