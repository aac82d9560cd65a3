use std::fs;
use std::path::Path;

use wastebench_core::manifest::{
    apply_corrections, materialize, parse_corrections, parse_manifest, summarize, DatasetManifest, ManifestError,
};
use wastebench_core::manifest::make_splits;
use wastebench_core::pipeline::{balance as plan_balance, materialize_balance};

use crate::config::RunConfig;
use crate::error::{io, CliError};

pub(crate) const MANIFEST_FILE: &str = "manifest.json";
pub(crate) const BALANCED_MANIFEST_FILE: &str = "balanced_manifest.json";

pub(crate) fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io(parent.display(), e))?;
    }
    fs::write(path, contents).map_err(|e| io(path.display(), e))
}

fn json(value: &impl serde::Serialize) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    text
}

pub(crate) fn ingest(config: &RunConfig) -> Result<(), CliError> {
    let manifest_path = config.required_path("manifest")?;
    let manifest = parse_manifest(manifest_path).map_err(|e| match e {
        ManifestError::MissingFile(p) => {
            CliError::Validation(format!("paths.manifest: file not found: {}", p.display()))
        }
        e => e.into(),
    })?;
    let root = &config.paths.dataset_root;
    let manifest = match config.optional_path("corrections") {
        Some(path) => {
            let corrections = parse_corrections(path).map_err(|e| match e {
                ManifestError::MissingFile(p) => {
                    CliError::Validation(format!("paths.corrections: file not found: {}", p.display()))
                }
                e => e.into(),
            })?;
            let (corrected, audit) = apply_corrections(&manifest, &corrections)?;
            write(&root.join("corrections_audit.json"), json(&audit))?;
            println!("applied {} label correction(s)", audit.len());
            corrected
        }
        None => manifest,
    };
    let plan = make_splits(&manifest, config.dataset.validation_fraction, config.dataset.split_seed)?;
    for label in &plan.degenerate_classes {
        log::warn!("class {label} has no records to split");
    }
    let manifest = manifest.with_plan(&plan)?;
    let layout = materialize(&manifest, &plan, &config.paths.data_root, root)?;
    write(&root.join(MANIFEST_FILE), manifest.to_json())?;
    write(&root.join("split_plan.json"), plan.to_json())?;
    let summary = summarize(&manifest);
    write(&root.join("summary.json"), json(&summary))?;
    print!("{}", summary.to_text());
    println!(
        "materialized {} file(s) under {} ({} copied, {} unchanged)",
        layout.counts.values().sum::<usize>(),
        root.display(),
        layout.copied,
        layout.unchanged
    );
    Ok(())
}

pub(crate) fn load_ingested(root: &Path) -> Result<DatasetManifest, CliError> {
    let path = root.join(MANIFEST_FILE);
    parse_manifest(&path).map_err(|e| match e {
        ManifestError::MissingFile(_) => CliError::Io(format!(
            "{} not found; run `wastebench ingest` first",
            path.display()
        )),
        e => e.into(),
    })
}

pub(crate) fn balance(config: &RunConfig) -> Result<(), CliError> {
    let root = &config.paths.dataset_root;
    let manifest = load_ingested(root)?;
    let plan = plan_balance(&manifest)?;
    let written = materialize_balance(
        &plan,
        &manifest,
        root,
        config.dataset.balance_seed,
        &config.pipeline.augmentation,
    )?;
    let balanced = plan.apply_to_manifest(&manifest)?;
    write(&root.join("balance_plan.json"), plan.to_json())?;
    write(&root.join(BALANCED_MANIFEST_FILE), balanced.to_json())?;
    let summary = summarize(&balanced);
    write(&root.join("balanced_summary.json"), json(&summary))?;
    if plan.is_noop() {
        println!("training classes already balanced");
    } else {
        println!(
            "wrote {written} augmented {} image(s); each training class now has {}",
            plan.minority_label, plan.target_count
        );
    }
    print!("{}", summary.to_text());
    Ok(())
}
