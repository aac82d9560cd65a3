use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::augment::{apply_augmentation, sample_augmentation, AugmentationRanges};
use super::{load_standardized, PipelineError};
use crate::manifest::{layout_dir, layout_file_name, DatasetManifest, ImageRecord, Split};
use crate::Label;

/// Per-source augmentation copy counts that equalize the two classes of the
/// training split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalancePlan {
    #[serde(rename = "minority")]
    pub minority_label: Label,
    #[serde(rename = "target")]
    pub target_count: usize,
    #[serde(rename = "copies")]
    pub copies_per_source: BTreeMap<String, usize>,
}

/// Id of the `k`-th augmented copy of `source_id` (1-based).
pub fn augmented_id(source_id: &str, k: usize) -> String {
    format!("{source_id}__aug{k}")
}

impl BalancePlan {
    pub fn total_copies(&self) -> usize {
        self.copies_per_source.values().sum()
    }

    pub fn is_noop(&self) -> bool {
        self.total_copies() == 0
    }

    /// Records for every augmented copy, in source-id order.
    pub fn generated_records(&self, manifest: &DatasetManifest) -> Vec<ImageRecord> {
        let mut out = Vec::with_capacity(self.total_copies());
        for (source_id, &copies) in &self.copies_per_source {
            let Some(source) = manifest.get(source_id) else { continue };
            for k in 1..=copies {
                let id = augmented_id(source_id, k);
                out.push(ImageRecord {
                    path: format!("{id}.png"),
                    image_id: id,
                    source: source.source,
                    label: source.label,
                    split: Split::Train,
                });
            }
        }
        out
    }

    /// Manifest with the augmented copies appended.
    pub fn apply_to_manifest(&self, manifest: &DatasetManifest) -> Result<DatasetManifest, PipelineError> {
        Ok(manifest.extended(self.generated_records(manifest))?)
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("plan serializes");
        text.push('\n');
        text
    }
}

/// Balance the `train` split of `manifest` by spreading the class deficit
/// over the minority sources: every source receives `deficit / m` copies and
/// the first `deficit % m` sources (by id) one more.
pub fn balance(manifest: &DatasetManifest) -> Result<BalancePlan, PipelineError> {
    let train = manifest.restrict(Split::Train);
    let pos = train.count(Label::Positive);
    let neg = train.count(Label::Negative);
    for (label, n) in [(Label::Positive, pos), (Label::Negative, neg)] {
        if n == 0 {
            return Err(PipelineError::EmptyClass(label));
        }
    }
    let (minority, m, target) = if pos <= neg {
        (Label::Positive, pos, neg)
    } else {
        (Label::Negative, neg, pos)
    };
    let deficit = target - m;
    let mut sources: Vec<&str> = train
        .records()
        .iter()
        .filter(|r| r.label == minority)
        .map(|r| r.image_id.as_str())
        .collect();
    sources.sort_unstable();
    let (base, extra) = (deficit / m, deficit % m);
    let copies_per_source = sources
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), base + usize::from(i < extra)))
        .collect();
    Ok(BalancePlan {
        minority_label: minority,
        target_count: target,
        copies_per_source,
    })
}

/// Write the augmented copies of a plan into an existing layout under
/// `root/train/<minority>/`. Copy `k` of source `s` uses the augmentation
/// drawn for `(seed, "s__augk", 0)`. Returns the number of files written.
pub fn materialize_balance(
    plan: &BalancePlan,
    manifest: &DatasetManifest,
    root: &Path,
    seed: u64,
    ranges: &AugmentationRanges,
) -> Result<usize, PipelineError> {
    let dir = layout_dir(root, Split::Train, plan.minority_label);
    fs::create_dir_all(&dir).map_err(|e| PipelineError::Io {
        path: dir.display().to_string(),
        reason: e.to_string(),
    })?;
    let mut written = 0;
    for (source_id, &copies) in &plan.copies_per_source {
        if copies == 0 {
            continue;
        }
        let record = manifest
            .get(source_id)
            .ok_or_else(|| crate::manifest::ManifestError::UnknownId(source_id.clone()))?;
        let image = load_standardized(&dir.join(layout_file_name(record)))?;
        for k in 1..=copies {
            let id = augmented_id(source_id, k);
            let spec = sample_augmentation(seed, &id, 0, ranges);
            let out = apply_augmentation(&image, &spec)?;
            let path = dir.join(format!("{id}.png"));
            out.save(&path).map_err(|e| PipelineError::Io {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
            written += 1;
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::ImageSource;

    fn train_manifest(pos: usize, neg: usize) -> DatasetManifest {
        let mut records = Vec::new();
        for (label, n, prefix) in [(Label::Positive, pos, "p"), (Label::Negative, neg, "n")] {
            for i in 0..n {
                records.push(ImageRecord {
                    image_id: format!("{prefix}{i:05}"),
                    path: format!("{prefix}{i}.png"),
                    source: ImageSource::Agea,
                    label,
                    split: Split::Train,
                });
            }
        }
        DatasetManifest::new(records).unwrap()
    }

    #[test]
    fn spreads_deficit_evenly() {
        let plan = balance(&train_manifest(100, 250)).unwrap();
        assert_eq!(plan.minority_label, Label::Positive);
        assert_eq!(plan.total_copies(), 150);
        assert!(plan.copies_per_source.values().all(|&c| c == 1 || c == 2));
        assert_eq!(plan.target_count, 250);
    }

    #[test]
    fn single_minority_source_takes_whole_deficit() {
        let plan = balance(&train_manifest(1, 5)).unwrap();
        assert_eq!(plan.copies_per_source.values().copied().collect::<Vec<_>>(), vec![4]);
    }

    #[test]
    fn balanced_input_is_a_noop() {
        let plan = balance(&train_manifest(4852, 4852)).unwrap();
        assert!(plan.is_noop());
        assert_eq!(plan.target_count, 4852);
        let after = plan.apply_to_manifest(&train_manifest(4852, 4852)).unwrap();
        assert_eq!(after.count(Label::Positive), 4852);
        assert_eq!(after.count(Label::Negative), 4852);
    }

    #[test]
    fn negative_minority() {
        let m = train_manifest(7, 3);
        let plan = balance(&m).unwrap();
        assert_eq!(plan.minority_label, Label::Negative);
        let after = plan.apply_to_manifest(&m).unwrap();
        assert_eq!(after.count(Label::Negative), 7);
    }

    #[test]
    fn empty_class_is_an_error() {
        assert!(matches!(
            balance(&train_manifest(0, 3)).unwrap_err(),
            PipelineError::EmptyClass(Label::Positive)
        ));
    }

    #[test]
    fn only_train_split_counts() {
        let mut records = train_manifest(2, 4).records().to_vec();
        records.push(ImageRecord {
            image_id: "val".into(),
            path: "val.png".into(),
            source: ImageSource::Agea,
            label: Label::Positive,
            split: Split::Validation,
        });
        let plan = balance(&DatasetManifest::new(records).unwrap()).unwrap();
        assert_eq!(plan.total_copies(), 2);
        assert!(!plan.copies_per_source.contains_key("val"));
    }

    #[test]
    fn json_shape() {
        let plan = balance(&train_manifest(1, 3)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&plan.to_json()).unwrap();
        assert_eq!(v["minority"], 1);
        assert_eq!(v["target"], 3);
        assert_eq!(v["copies"]["p00000"], 2);
    }
}
