//! Dataset manifests: ingest, label corrections, stratified splits and the
//! `{train,validation,test}/{negative,positive}` folder layout.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::Label;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest file not found: {0}")]
    MissingFile(PathBuf),
    #[error("schema violation in {entry}, field `{field}`: {reason}")]
    SchemaViolation {
        entry: String,
        field: String,
        reason: String,
    },
    #[error("duplicate image id {0:?}")]
    DuplicateId(String),
    #[error("correction refers to unknown image id {0:?}")]
    UnknownId(String),
    #[error("stale correction for {id:?}: expected old label {expected}, record has {actual}")]
    StaleCorrection {
        id: String,
        expected: Label,
        actual: Label,
    },
    #[error("correction for {0:?} does not change the label")]
    NoOpCorrection(String),
    #[error("manifest has no records")]
    EmptyManifest,
    #[error("validation fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("split plan does not cover image {0:?}")]
    PlanMismatch(String),
    #[error("{} image file(s) missing: {}", .0.len(), .0.join(", "))]
    MissingImageFile(Vec<String>),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ManifestError + '_ {
    move |source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ImageSource {
    #[serde(rename = "AGEA")]
    Agea,
    #[serde(rename = "WorldView3")]
    WorldView3,
    #[serde(rename = "GoogleEarth")]
    GoogleEarth,
    #[serde(rename = "synthetic")]
    Synthetic,
    #[serde(rename = "unknown")]
    Unknown,
}

impl ImageSource {
    /// Lenient mapping of source strings found in AerialWaste-style metadata.
    pub fn from_name(name: &str) -> ImageSource {
        let key: String = name
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "agea" | "ageaorthophoto" | "ageaorthophotos" => ImageSource::Agea,
            "worldview3" | "wv3" | "worldview" => ImageSource::WorldView3,
            "googleearth" | "ge" | "google" => ImageSource::GoogleEarth,
            "synthetic" | "toy" => ImageSource::Synthetic,
            _ => ImageSource::Unknown,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ImageSource::Agea => "AGEA",
            ImageSource::WorldView3 => "WorldView3",
            ImageSource::GoogleEarth => "GoogleEarth",
            ImageSource::Synthetic => "synthetic",
            ImageSource::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
    Unassigned,
}

impl Split {
    pub const MATERIALIZED: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }

    fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "validation" | "val" => Some(Split::Validation),
            "test" => Some(Split::Test),
            "unassigned" => Some(Split::Unassigned),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub path: String,
    pub source: ImageSource,
    pub label: Label,
    pub split: Split,
}

/// A collection of records with unique ids. The tallies are always
/// recomputed from the records, never cached.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    records: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn new(records: Vec<ImageRecord>) -> Result<Self, ManifestError> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.image_id.as_str()) {
                return Err(ManifestError::DuplicateId(r.image_id.clone()));
            }
        }
        Ok(DatasetManifest { records })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    pub fn class_counts(&self) -> BTreeMap<Label, usize> {
        let mut counts: BTreeMap<Label, usize> = Label::ALL.iter().map(|&l| (l, 0)).collect();
        for r in &self.records {
            *counts.entry(r.label).or_default() += 1;
        }
        counts
    }

    pub fn source_counts(&self) -> BTreeMap<ImageSource, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.source).or_default() += 1;
        }
        counts
    }

    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.split).or_default() += 1;
        }
        counts
    }

    pub fn count(&self, label: Label) -> usize {
        self.records.iter().filter(|r| r.label == label).count()
    }

    /// Records of one split, as a manifest of their own.
    pub fn restrict(&self, split: Split) -> DatasetManifest {
        DatasetManifest {
            records: self
                .records
                .iter()
                .filter(|r| r.split == split)
                .cloned()
                .collect(),
        }
    }

    /// Copy of the manifest with every record's split taken from `plan`.
    pub fn with_plan(&self, plan: &SplitPlan) -> Result<DatasetManifest, ManifestError> {
        let records = self
            .records
            .iter()
            .map(|r| {
                let split = plan
                    .assignments
                    .get(&r.image_id)
                    .copied()
                    .ok_or_else(|| ManifestError::PlanMismatch(r.image_id.clone()))?;
                Ok(ImageRecord { split, ..r.clone() })
            })
            .collect::<Result<Vec<_>, ManifestError>>()?;
        Ok(DatasetManifest { records })
    }

    /// Append records, enforcing id uniqueness.
    pub fn extended(&self, extra: impl IntoIterator<Item = ImageRecord>) -> Result<DatasetManifest, ManifestError> {
        let mut records = self.records.clone();
        records.extend(extra);
        DatasetManifest::new(records)
    }

    pub fn to_json(&self) -> String {
        let images: Vec<Value> = self
            .records
            .iter()
            .map(|r| {
                let mut entry = serde_json::json!({
                    "id": r.image_id,
                    "path": r.path,
                    "source": r.source.as_str(),
                    "label": r.label as u8,
                });
                if r.split != Split::Unassigned {
                    entry["split"] = Value::String(r.split.as_str().to_string());
                }
                entry
            })
            .collect();
        let mut text = serde_json::to_string_pretty(&serde_json::json!({ "images": images }))
            .expect("manifest serializes");
        text.push('\n');
        text
    }

    pub fn from_json_str(text: &str) -> Result<Self, ManifestError> {
        let root: Value = serde_json::from_str(text).map_err(|e| ManifestError::SchemaViolation {
            entry: "<document>".into(),
            field: "<json>".into(),
            reason: e.to_string(),
        })?;
        let images = root
            .get("images")
            .and_then(Value::as_array)
            .ok_or_else(|| ManifestError::SchemaViolation {
                entry: "<document>".into(),
                field: "images".into(),
                reason: "expected a top-level array `images`".into(),
            })?;
        let mut records = Vec::with_capacity(images.len());
        for (index, entry) in images.iter().enumerate() {
            records.push(parse_entry(index, entry)?);
        }
        DatasetManifest::new(records)
    }
}

fn parse_entry(index: usize, entry: &Value) -> Result<ImageRecord, ManifestError> {
    let name = entry
        .get("id")
        .and_then(Value::as_str)
        .map(|id| format!("entry {index} (id {id:?})"))
        .unwrap_or_else(|| format!("entry {index}"));
    let violation = |field: &str, reason: &str| ManifestError::SchemaViolation {
        entry: name.clone(),
        field: field.to_string(),
        reason: reason.to_string(),
    };
    let obj = entry
        .as_object()
        .ok_or_else(|| violation("<entry>", "expected an object"))?;
    let string_field = |field: &str| -> Result<String, ManifestError> {
        match obj.get(field) {
            Some(Value::String(s)) if !s.is_empty() => Ok(s.clone()),
            Some(Value::String(_)) => Err(violation(field, "must not be empty")),
            Some(_) => Err(violation(field, "expected a string")),
            None => Err(violation(field, "missing")),
        }
    };
    let image_id = string_field("id")?;
    let path = string_field("path")?;
    let source = ImageSource::from_name(&string_field("source")?);
    let label = match obj.get("label") {
        Some(v) => v
            .as_u64()
            .and_then(Label::from_index)
            .ok_or_else(|| violation("label", "expected 0 or 1"))?,
        None => return Err(violation("label", "missing")),
    };
    let split = match obj.get("split") {
        None | Some(Value::Null) => Split::Unassigned,
        Some(Value::String(s)) => {
            Split::parse(s).ok_or_else(|| violation("split", "expected train|validation|test"))?
        }
        Some(_) => return Err(violation("split", "expected a string")),
    };
    Ok(ImageRecord {
        image_id,
        path,
        source,
        label,
        split,
    })
}

pub fn parse_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, ManifestError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => ManifestError::MissingFile(path.to_path_buf()),
        _ => ManifestError::Io {
            path: path.display().to_string(),
            source: e,
        },
    })?;
    DatasetManifest::from_json_str(&text)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCorrection {
    #[serde(rename = "id")]
    pub image_id: String,
    pub old_label: Label,
    pub new_label: Label,
    #[serde(default)]
    pub note: String,
}

/// One applied correction, for the audit log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRow {
    pub image_id: String,
    pub path: String,
    pub old_label: Label,
    pub new_label: Label,
    pub note: String,
}

pub fn parse_corrections(path: impl AsRef<Path>) -> Result<Vec<LabelCorrection>, ManifestError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => ManifestError::MissingFile(path.to_path_buf()),
        _ => ManifestError::Io {
            path: path.display().to_string(),
            source: e,
        },
    })?;
    serde_json::from_str(&text).map_err(|e| ManifestError::SchemaViolation {
        entry: path.display().to_string(),
        field: "<corrections>".into(),
        reason: e.to_string(),
    })
}

/// Apply label corrections, returning the corrected manifest and one audit
/// row per correction. The input manifest is left untouched; on any error no
/// correction is applied.
pub fn apply_corrections(
    manifest: &DatasetManifest,
    corrections: &[LabelCorrection],
) -> Result<(DatasetManifest, Vec<AuditRow>), ManifestError> {
    let index: HashMap<&str, usize> = manifest
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.image_id.as_str(), i))
        .collect();
    let mut records = manifest.records.clone();
    let mut audit = Vec::with_capacity(corrections.len());
    for c in corrections {
        if c.old_label == c.new_label {
            return Err(ManifestError::NoOpCorrection(c.image_id.clone()));
        }
        let &i = index
            .get(c.image_id.as_str())
            .ok_or_else(|| ManifestError::UnknownId(c.image_id.clone()))?;
        let record = &mut records[i];
        if record.label != c.old_label {
            return Err(ManifestError::StaleCorrection {
                id: c.image_id.clone(),
                expected: c.old_label,
                actual: record.label,
            });
        }
        record.label = c.new_label;
        audit.push(AuditRow {
            image_id: c.image_id.clone(),
            path: record.path.clone(),
            old_label: c.old_label,
            new_label: c.new_label,
            note: c.note.clone(),
        });
    }
    Ok((DatasetManifest { records }, audit))
}

/// Assignment of every image to a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub fraction: f64,
    pub assignments: BTreeMap<String, Split>,
    /// Classes with no splittable records. Splitting still succeeds.
    #[serde(skip)]
    pub degenerate_classes: Vec<Label>,
}

impl SplitPlan {
    pub fn count(&self, split: Split) -> usize {
        self.assignments.values().filter(|&&s| s == split).count()
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("plan serializes");
        text.push('\n');
        text
    }

    pub fn from_json_str(text: &str) -> Result<Self, ManifestError> {
        serde_json::from_str(text).map_err(|e| ManifestError::SchemaViolation {
            entry: "<split plan>".into(),
            field: "<json>".into(),
            reason: e.to_string(),
        })
    }
}

/// Stratified train/validation split of every record not tagged `test`.
///
/// The overall validation count is `round(fraction * n)`; it is shared among
/// the classes by largest remainder, so each class receives the floor or
/// ceiling of `fraction * class_count`.
pub fn make_splits(
    manifest: &DatasetManifest,
    validation_fraction: f64,
    seed: u64,
) -> Result<SplitPlan, ManifestError> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(ManifestError::InvalidFraction(validation_fraction));
    }
    if manifest.is_empty() {
        return Err(ManifestError::EmptyManifest);
    }

    let mut assignments = BTreeMap::new();
    let mut pools: BTreeMap<Label, Vec<&str>> = Label::ALL.iter().map(|&l| (l, Vec::new())).collect();
    for r in &manifest.records {
        if r.split == Split::Test {
            assignments.insert(r.image_id.clone(), Split::Test);
        } else {
            pools.get_mut(&r.label).expect("both labels present").push(&r.image_id);
        }
    }

    let total: usize = pools.values().map(Vec::len).sum();
    let target = (validation_fraction * total as f64).round() as usize;
    let mut quotas: Vec<(Label, usize, f64)> = pools
        .iter()
        .map(|(&label, ids)| {
            let exact = validation_fraction * ids.len() as f64;
            (label, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut remaining = target.saturating_sub(quotas.iter().map(|q| q.1).sum());
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].2.total_cmp(&quotas[a].2).then(a.cmp(&b)));
    for i in order {
        if remaining == 0 {
            break;
        }
        if quotas[i].2 > 0.0 {
            quotas[i].1 += 1;
            remaining -= 1;
        }
    }

    let mut degenerate_classes = Vec::new();
    for (label, quota, _) in quotas {
        let mut ids = pools[&label].clone();
        if ids.is_empty() {
            degenerate_classes.push(label);
            continue;
        }
        // Input order must not matter, only the set of ids and the seed.
        ids.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((label as u64 + 1) << 56));
        ids.shuffle(&mut rng);
        for (k, id) in ids.into_iter().enumerate() {
            let split = if k < quota { Split::Validation } else { Split::Train };
            assignments.insert(id.to_string(), split);
        }
    }

    Ok(SplitPlan {
        seed,
        fraction: validation_fraction,
        assignments,
        degenerate_classes,
    })
}

/// Per-leaf file counts of a materialized layout, keyed `split/class`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FolderLayout {
    pub root: PathBuf,
    pub counts: BTreeMap<String, usize>,
    pub copied: usize,
    pub unchanged: usize,
}

impl FolderLayout {
    pub fn count(&self, split: Split, label: Label) -> usize {
        self.counts
            .get(&format!("{}/{}", split.as_str(), label.folder_name()))
            .copied()
            .unwrap_or(0)
    }
}

/// File name used for a record inside the layout: `<id>.<ext>`.
pub fn layout_file_name(record: &ImageRecord) -> String {
    let ext = Path::new(&record.path)
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("png");
    format!("{}.{}", record.image_id, ext)
}

pub fn layout_dir(root: &Path, split: Split, label: Label) -> PathBuf {
    root.join(split.as_str()).join(label.folder_name())
}

/// Copy every record into `root/<split>/<class>/`. Image paths are resolved
/// against `data_root`. Missing images are all reported before anything is
/// written. Existing identical files are left alone.
pub fn materialize(
    manifest: &DatasetManifest,
    plan: &SplitPlan,
    data_root: &Path,
    root: &Path,
) -> Result<FolderLayout, ManifestError> {
    let mut jobs = Vec::with_capacity(manifest.len());
    let mut missing = Vec::new();
    for r in &manifest.records {
        let split = plan
            .assignments
            .get(&r.image_id)
            .copied()
            .ok_or_else(|| ManifestError::PlanMismatch(r.image_id.clone()))?;
        if split == Split::Unassigned {
            return Err(ManifestError::PlanMismatch(r.image_id.clone()));
        }
        let source = data_root.join(&r.path);
        if !source.is_file() {
            missing.push(format!("{} ({})", r.image_id, source.display()));
            continue;
        }
        jobs.push((source, layout_dir(root, split, r.label).join(layout_file_name(r))));
    }
    if !missing.is_empty() {
        return Err(ManifestError::MissingImageFile(missing));
    }

    for split in Split::MATERIALIZED {
        for label in Label::ALL {
            let dir = layout_dir(root, split, label);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
    }
    let mut copied = 0;
    let mut unchanged = 0;
    for (source, target) in &jobs {
        if target.is_file() && files_equal(source, target)? {
            unchanged += 1;
            continue;
        }
        fs::copy(source, target).map_err(io_err(target))?;
        copied += 1;
    }
    Ok(FolderLayout {
        root: root.to_path_buf(),
        counts: count_layout(root)?,
        copied,
        unchanged,
    })
}

fn files_equal(a: &Path, b: &Path) -> Result<bool, ManifestError> {
    let ma = fs::metadata(a).map_err(io_err(a))?;
    let mb = fs::metadata(b).map_err(io_err(b))?;
    if ma.len() != mb.len() {
        return Ok(false);
    }
    Ok(fs::read(a).map_err(io_err(a))? == fs::read(b).map_err(io_err(b))?)
}

/// Count files under each `split/class` leaf of a layout.
pub fn count_layout(root: &Path) -> Result<BTreeMap<String, usize>, ManifestError> {
    let mut counts = BTreeMap::new();
    for split in Split::MATERIALIZED {
        for label in Label::ALL {
            let dir = layout_dir(root, split, label);
            let n = if dir.is_dir() {
                fs::read_dir(&dir)
                    .map_err(io_err(&dir))?
                    .filter_map(Result::ok)
                    .filter(|e| e.path().is_file())
                    .count()
            } else {
                0
            };
            counts.insert(format!("{}/{}", split.as_str(), label.folder_name()), n);
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestSummary {
    pub total: usize,
    pub negative: usize,
    pub positive: usize,
    pub by_source: BTreeMap<String, usize>,
    pub by_split: BTreeMap<String, BTreeMap<String, usize>>,
}

pub fn summarize(manifest: &DatasetManifest) -> ManifestSummary {
    let classes = manifest.class_counts();
    let by_source = manifest
        .source_counts()
        .into_iter()
        .map(|(s, n)| (s.as_str().to_string(), n))
        .collect();
    let mut by_split: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for r in &manifest.records {
        let row = by_split.entry(r.split.as_str().to_string()).or_insert_with(|| {
            Label::ALL
                .iter()
                .map(|l| (l.folder_name().to_string(), 0))
                .collect()
        });
        *row.get_mut(r.label.folder_name()).expect("label row") += 1;
    }
    ManifestSummary {
        total: manifest.len(),
        negative: classes[&Label::Negative],
        positive: classes[&Label::Positive],
        by_source,
        by_split,
    }
}

impl ManifestSummary {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "images: {}\n  positive: {}\n  negative: {}\n",
            self.total, self.positive, self.negative
        );
        if !self.by_source.is_empty() {
            out.push_str("by source:\n");
            for (s, n) in &self.by_source {
                out.push_str(&format!("  {s:<12} {n}\n"));
            }
        }
        if !self.by_split.is_empty() {
            out.push_str("by split:          positive  negative\n");
            for (split, row) in &self.by_split {
                out.push_str(&format!(
                    "  {split:<16} {:>8}  {:>8}\n",
                    row["positive"], row["negative"]
                ));
            }
        }
        out
    }
}

/// Ids of all records, for set comparisons.
pub fn id_set(manifest: &DatasetManifest) -> BTreeSet<&str> {
    manifest.records.iter().map(|r| r.image_id.as_str()).collect()
}
