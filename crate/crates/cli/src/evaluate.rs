use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use wastebench_core::fusion::{evaluate_fused, fuse_files, AlignOptions, THREE_MODEL_PRESET};
use wastebench_core::metrics::{
    compare_to_baseline, evaluate_binary, format_table, macro_roc, micro_roc, render_roc_svg, roc_points,
    roc_to_csv, BaselineComparison, BaselineTable, BinaryReport, Metric, WeightedMetrics,
};
use wastebench_core::predictions::{read_prediction_file, write_prediction_file};
use wastebench_core::{Label, PredictionRecord};

use crate::config::{ReportFormat, RunConfig};
use crate::dataset::write;
use crate::error::{io, CliError};
use crate::run::{RunSummary, PREDICTIONS_FILE, RUN_FILE};
use crate::{EvaluateArgs, FuseArgs, ReportArgs};

fn baselines(config: &RunConfig) -> Result<BaselineTable, CliError> {
    match config.optional_path("baselines") {
        Some(p) => Ok(BaselineTable::load(p)?),
        None => Ok(BaselineTable::bundled()),
    }
}

fn to_json(value: &impl Serialize) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    text
}

/// Names derived from file stems, widened with parent directories until
/// they are unique.
fn default_names(paths: &[PathBuf]) -> Vec<String> {
    for depth in 0..4 {
        let names: Vec<String> = paths
            .iter()
            .map(|p| {
                let mut parts: Vec<String> = p
                    .parent()
                    .into_iter()
                    .flat_map(|d| d.components().rev().take(depth))
                    .map(|c| c.as_os_str().to_string_lossy().into_owned())
                    .collect();
                parts.reverse();
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                if depth > 0 && stem == "predictions" {
                    parts.join("/")
                } else {
                    parts.push(stem);
                    parts.join("/")
                }
            })
            .collect();
        if names.iter().collect::<BTreeSet<_>>().len() == names.len() {
            return names;
        }
    }
    paths.iter().map(|p| p.display().to_string()).collect()
}

fn names_for(paths: &[PathBuf], given: &[String]) -> Result<Vec<String>, CliError> {
    if given.is_empty() {
        return Ok(default_names(paths));
    }
    if given.len() != paths.len() {
        return Err(CliError::Validation(format!(
            "{} file(s) but {} name(s)",
            paths.len(),
            given.len()
        )));
    }
    Ok(given.to_vec())
}

/// Directory-safe form of a display name.
fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

/// Write the report and ROC artifacts of one labeled prediction set.
fn write_artifacts(
    dir: &Path,
    name: &str,
    records: &[PredictionRecord],
    formats: &[ReportFormat],
    comparisons: &[BaselineComparison],
) -> Result<BinaryReport, CliError> {
    let report = evaluate_binary(records)?;
    let mut text = format!("{name} ({} samples)\n", records.len());
    text.push_str(&report.to_text());
    for c in comparisons {
        text.push_str(&c.to_text());
    }
    if formats.contains(&ReportFormat::Text) {
        write(&dir.join("report.txt"), &text)?;
    }
    if formats.contains(&ReportFormat::Json) {
        #[derive(Serialize)]
        struct Out<'a> {
            name: &'a str,
            report: &'a BinaryReport,
            baselines: &'a [BaselineComparison],
        }
        write(
            &dir.join("report.json"),
            to_json(&Out {
                name,
                report: &report,
                baselines: comparisons,
            }),
        )?;
    }
    let want_csv = formats.contains(&ReportFormat::Csv);
    let want_svg = formats.contains(&ReportFormat::Svg);
    if (want_csv || want_svg) && report.auc.is_some() {
        let curves = [
            ("positive", roc_points(records, Label::Positive)?),
            ("negative", roc_points(records, Label::Negative)?),
            ("micro", micro_roc(records)?),
            ("macro", macro_roc(records)?),
        ];
        if want_csv {
            for (label, curve) in &curves {
                write(&dir.join(format!("roc_{label}.csv")), roc_to_csv(curve))?;
            }
        }
        if want_svg {
            let refs: Vec<(&str, &_)> = curves.iter().map(|(l, c)| (*l, c)).collect();
            write(&dir.join("roc.svg"), render_roc_svg(&refs, &format!("ROC: {name}")))?;
        }
    }
    print!("{text}");
    Ok(report)
}

pub(crate) fn evaluate(config: &RunConfig, args: &EvaluateArgs) -> Result<(), CliError> {
    let names = names_for(&args.predictions, &args.names)?;
    if !args.baseline.is_empty() && args.baseline.len() != args.predictions.len() {
        return Err(CliError::Validation(format!(
            "{} file(s) but {} baseline name(s)",
            args.predictions.len(),
            args.baseline.len()
        )));
    }
    let basis = args.basis.unwrap_or(config.report.basis);
    let table = baselines(config)?;
    let out = args
        .output
        .clone()
        .unwrap_or_else(|| config.paths.output_root.join("evaluation"));
    let mut rows = Vec::new();
    for (i, (path, name)) in args.predictions.iter().zip(&names).enumerate() {
        let records = read_prediction_file(path)?;
        let report = evaluate_binary(&records)?;
        let comparisons = match args.baseline.get(i) {
            Some(b) => vec![compare_to_baseline(&report.row(basis), &table, b, config.report.tolerance_pp)?],
            None => Vec::new(),
        };
        write_artifacts(&out.join(slug(name)), name, &records, &config.report.formats, &comparisons)?;
        rows.push((name.clone(), report.row(basis)));
    }
    if rows.len() > 1 {
        let table_rows: Vec<(&str, [f64; 5])> = rows
            .iter()
            .map(|(n, w)| (n.as_str(), Metric::ALL.map(|m| w.get(m))))
            .collect();
        let text = format_table(&table_rows);
        write(&out.join("summary.txt"), &text)?;
        print!("{text}");
    }
    Ok(())
}

pub(crate) fn fuse(config: &RunConfig, args: &FuseArgs) -> Result<(), CliError> {
    let names = match args.preset.as_deref() {
        None => names_for(&args.inputs, &args.names)?,
        Some("three_model") => {
            if args.inputs.len() != THREE_MODEL_PRESET.len() {
                return Err(CliError::Validation(format!(
                    "--preset three_model takes {} inputs ({}), got {}",
                    THREE_MODEL_PRESET.len(),
                    THREE_MODEL_PRESET.join(", "),
                    args.inputs.len()
                )));
            }
            THREE_MODEL_PRESET.iter().map(|s| s.to_string()).collect()
        }
        Some(other) => return Err(CliError::Validation(format!("unknown preset `{other}` (expected `three_model`)"))),
    };
    let options = AlignOptions {
        allow_intersection: args.allow_intersection,
    };
    let fused = fuse_files(&args.inputs, &names, options)?;
    let output = args
        .output
        .clone()
        .unwrap_or_else(|| config.paths.output_root.join("fusion").join("fused.csv"));
    write_prediction_file(&output, &fused.fused)?;
    let dir = output.parent().map(Path::to_path_buf).unwrap_or_default();
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    write(&dir.join(format!("{stem}_manifest.json")), fused.manifest(&output, options).to_json())?;
    if !fused.aligned.dropped.is_empty() {
        println!(
            "intersection join dropped {} filename(s): {}",
            fused.aligned.dropped.len(),
            fused.aligned.dropped.join(", ")
        );
    }
    println!("fused {} input(s) over {} filename(s) into {}", names.len(), fused.fused.len(), output.display());
    if fused.fused.iter().all(|r| r.true_label.is_some()) {
        let report = evaluate_fused(&fused.fused)?;
        let comparisons = if args.preset.is_some() {
            let table = baselines(config)?;
            let tol = config.report.tolerance_pp;
            vec![
                compare_to_baseline(&WeightedMetrics::from(&report.positive), &table, "fusion_positive", tol)?,
                compare_to_baseline(&WeightedMetrics::from(&report.negative), &table, "fusion_negative", tol)?,
                compare_to_baseline(&report.weighted, &table, "fusion_weighted", tol)?,
            ]
        } else {
            Vec::new()
        };
        write_artifacts(&dir.join(format!("{stem}_report")), &stem, &fused.fused, &config.report.formats, &comparisons)?;
    }
    Ok(())
}

/// Published rows that a run can be compared with.
fn baseline_names(run: &RunSummary) -> Vec<String> {
    match run.model.as_str() {
        "parallel_ensemble" => {
            let mut names = vec![format!("ensemble_{}", run.optimizer)];
            if run.optimizer == "adamw" {
                names.push("parallel_ensemble".into());
            }
            names
        }
        "mobilenetv2_050" if run.frozen_prefix == 10 => vec!["mobilenetv2_050_frozen10".into()],
        other => vec![other.to_string()],
    }
}

#[derive(Debug, Serialize)]
struct RunReport {
    run: RunSummary,
    directory: PathBuf,
    report: Option<BinaryReport>,
    baselines: Vec<BaselineComparison>,
}

/// `<root>/<model>/<optimizer>/<seed>/run.json` files, sorted.
fn find_runs(root: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut runs = Vec::new();
    let subdirs = |dir: &Path| -> Result<Vec<PathBuf>, CliError> {
        let mut out: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| io(dir.display(), e))?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        out.sort();
        Ok(out)
    };
    for model in subdirs(root)? {
        for optimizer in subdirs(&model)? {
            for seed in subdirs(&optimizer)? {
                if seed.join(RUN_FILE).is_file() {
                    runs.push(seed);
                }
            }
        }
    }
    Ok(runs)
}

pub(crate) fn report(config: &RunConfig, args: &ReportArgs) -> Result<(), CliError> {
    let root = &config.paths.output_root;
    if !root.is_dir() {
        return Err(CliError::Io(format!("output root {} does not exist", root.display())));
    }
    let basis = args.basis.unwrap_or(config.report.basis);
    let table = baselines(config)?;
    let mut reports = Vec::new();
    for dir in find_runs(root)? {
        let text = fs::read_to_string(dir.join(RUN_FILE)).map_err(|e| io(dir.join(RUN_FILE).display(), e))?;
        let run: RunSummary = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", dir.join(RUN_FILE).display())))?;
        let records = read_prediction_file(dir.join(PREDICTIONS_FILE))?;
        let labeled = !records.is_empty() && records.iter().all(|r| r.true_label.is_some());
        let report = if labeled { Some(evaluate_binary(&records)?) } else { None };
        let baselines = match &report {
            Some(r) => baseline_names(&run)
                .iter()
                .filter(|n| table.get(n).is_some())
                .map(|n| compare_to_baseline(&r.row(basis), &table, n, config.report.tolerance_pp))
                .collect::<Result<_, _>>()?,
            None => Vec::new(),
        };
        reports.push(RunReport {
            directory: dir.strip_prefix(root).unwrap_or(&dir).to_path_buf(),
            run,
            report,
            baselines,
        });
    }
    let labels: Vec<String> = reports
        .iter()
        .map(|r| format!("{} / {} / {}", r.run.model, r.run.optimizer, r.run.seed))
        .collect();
    let rows: Vec<(&str, [f64; 5])> = reports
        .iter()
        .zip(&labels)
        .filter_map(|(r, l)| r.report.as_ref().map(|rep| (l.as_str(), Metric::ALL.map(|m| rep.row(basis).get(m)))))
        .collect();
    let mut text = format!("{} run(s) under {}\n", reports.len(), root.display());
    if !rows.is_empty() {
        text.push_str(&format_table(&rows));
    }
    for r in &reports {
        if r.report.is_none() {
            text.push_str(&format!("{}: predictions carry no labels, not scored\n", r.directory.display()));
        }
        for c in &r.baselines {
            text.push_str(&c.to_text());
        }
    }
    write(&root.join("report.txt"), &text)?;
    write(&root.join("report.json"), to_json(&reports))?;
    print!("{text}");
    Ok(())
}
