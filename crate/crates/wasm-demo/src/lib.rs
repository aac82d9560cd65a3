//! Browser demo over the core crate. Each operation is a plain function
//! returning JSON or pixels, wrapped for JavaScript by `wasm_bindgen`.

use image::{Rgb, RgbImage};
use serde::Serialize;
use wasm_bindgen::prelude::*;
use wastebench_core::fusion::{align, average_fuse, AlignOptions};
use wastebench_core::metrics::{evaluate_binary, macro_roc, micro_roc, render_roc_svg, roc_points, BinaryReport};
use wastebench_core::pipeline::{apply_augmentation, sample_augmentation, AugmentationRanges, AugmentationSpec, STANDARD_SIZE};
use wastebench_core::predictions::{parse_csv, to_csv_string};
use wastebench_core::{Label, PredictionRecord};

#[derive(Debug, Serialize)]
pub struct RocOutput {
    pub samples: usize,
    pub report: BinaryReport,
    pub table: String,
    pub svg: String,
}

/// Records from either a prediction CSV (with `true_label`) or bare
/// `score,label` lines, where the score is the positive probability.
pub fn parse_scores(text: &str) -> Result<Vec<PredictionRecord>, String> {
    let text = text.trim();
    if text.starts_with("filename") {
        return parse_csv(&format!("{text}\n")).map_err(|e| e.to_string());
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = i + 1;
        let (score, label) = line
            .split_once([',', '\t', ' '])
            .ok_or_else(|| format!("line {row}: expected `score,label`"))?;
        let p: f64 = score
            .trim()
            .parse()
            .ok()
            .filter(|p| (0.0..=1.0).contains(p))
            .ok_or_else(|| format!("line {row}: score must be a number in [0, 1]"))?;
        let label: Label = label.trim().parse().map_err(|e| format!("line {row}: {e}"))?;
        out.push(PredictionRecord::new(format!("row{row:05}"), 1.0 - p, p).with_label(label));
    }
    if out.is_empty() {
        return Err("no rows".into());
    }
    Ok(out)
}

/// Three-row metric table, AUCs and an SVG of the four ROC curves.
pub fn roc_report(text: &str) -> Result<RocOutput, String> {
    let records = parse_scores(text)?;
    let report = evaluate_binary(&records).map_err(|e| e.to_string())?;
    if report.auc.is_none() {
        return Err("ROC needs at least one sample of each class".into());
    }
    let err = |e: wastebench_core::metrics::MetricsError| e.to_string();
    let curves = [
        ("positive", roc_points(&records, Label::Positive).map_err(err)?),
        ("negative", roc_points(&records, Label::Negative).map_err(err)?),
        ("micro", micro_roc(&records).map_err(err)?),
        ("macro", macro_roc(&records).map_err(err)?),
    ];
    let refs: Vec<(&str, &_)> = curves.iter().map(|(l, c)| (*l, c)).collect();
    Ok(RocOutput {
        samples: records.len(),
        table: report.to_text(),
        svg: render_roc_svg(&refs, "ROC"),
        report,
    })
}

#[derive(Debug, Serialize)]
pub struct FuseOutput {
    pub csv: String,
    pub dropped: Vec<String>,
    pub table: Option<String>,
}

/// Late fusion of prediction CSVs separated by blank lines.
pub fn fuse_text(text: &str, allow_intersection: bool) -> Result<FuseOutput, String> {
    let blocks: Vec<&str> = text.split("\n\n").map(str::trim).filter(|b| !b.is_empty()).collect();
    let files = blocks
        .iter()
        .enumerate()
        .map(|(i, b)| parse_csv(&format!("{b}\n")).map_err(|e| format!("input {}: {e}", i + 1)))
        .collect::<Result<Vec<_>, _>>()?;
    let names: Vec<String> = (1..=files.len()).map(|i| format!("model{i}")).collect();
    let aligned = align(&files, &names, AlignOptions { allow_intersection }).map_err(|e| e.to_string())?;
    let fused = average_fuse(&aligned);
    let table = if fused.iter().all(|r| r.true_label.is_some()) {
        Some(evaluate_binary(&fused).map_err(|e| e.to_string())?.to_text())
    } else {
        None
    };
    Ok(FuseOutput {
        csv: to_csv_string(&fused),
        dropped: aligned.dropped,
        table,
    })
}

/// 256x256 card with a grid, colored quadrants and a marker in the top-left
/// corner, so rotations and flips are easy to see.
pub fn test_card() -> RgbImage {
    let s = STANDARD_SIZE;
    RgbImage::from_fn(s, s, |x, y| {
        let half = s / 2;
        let base = match (x < half, y < half) {
            (true, true) => [200, 60, 60],
            (false, true) => [60, 160, 70],
            (true, false) => [60, 90, 200],
            (false, false) => [210, 190, 60],
        };
        if x % 32 == 0 || y % 32 == 0 {
            Rgb([30, 30, 30])
        } else if (16..48).contains(&x) && (16..48).contains(&y) && x - 16 <= 2 * (y - 16) {
            Rgb([255, 255, 255])
        } else {
            Rgb(base)
        }
    })
}

/// The augmentation drawn for `(seed, image_id, epoch)` under the default
/// ranges, and the test card it produces.
pub fn augment_card(seed: u64, image_id: &str, epoch: u64) -> Result<(AugmentationSpec, RgbImage), String> {
    let spec = sample_augmentation(seed, image_id, epoch, &AugmentationRanges::default());
    let image = apply_augmentation(&test_card(), &spec).map_err(|e| e.to_string())?;
    Ok((spec, image))
}

fn rgba(image: &RgbImage) -> Vec<u8> {
    image.pixels().flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

fn json(value: &impl Serialize) -> String {
    serde_json::to_string(value).expect("output serializes")
}

#[wasm_bindgen(js_name = rocReport)]
pub fn roc_report_js(text: &str) -> Result<String, JsError> {
    roc_report(text).map(|o| json(&o)).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = fusePredictions)]
pub fn fuse_js(text: &str, allow_intersection: bool) -> Result<String, JsError> {
    fuse_text(text, allow_intersection).map(|o| json(&o)).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = testCardRgba)]
pub fn test_card_js() -> Vec<u8> {
    rgba(&test_card())
}

#[wasm_bindgen(js_name = augmentationSpec)]
pub fn augmentation_spec_js(seed: u32, image_id: &str, epoch: u32) -> Result<String, JsError> {
    augment_card(seed.into(), image_id, epoch.into())
        .map(|(spec, _)| json(&spec))
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = augmentedCardRgba)]
pub fn augmented_card_js(seed: u32, image_id: &str, epoch: u32) -> Result<Vec<u8>, JsError> {
    augment_card(seed.into(), image_id, epoch.into())
        .map(|(_, image)| rgba(&image))
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = cardSize)]
pub fn card_size() -> u32 {
    STANDARD_SIZE
}
