use std::collections::BTreeMap;

use image::{DynamicImage, Rgb, RgbImage};
use proptest::prelude::*;
use wastebench_core::fusion::{align, average_fuse, AlignOptions};
use wastebench_core::manifest::{apply_corrections, make_splits, DatasetManifest, ImageRecord, ImageSource, LabelCorrection, Split};
use wastebench_core::metrics::{
    auc, class_metrics, confusion, confusion_with, roc_points, weighted_average, DecisionRule, Metric,
};
use wastebench_core::pipeline::{
    balance, denormalize, model_input, sample_augmentation, standardize, AugmentationRanges, NormalizationStats,
};
use wastebench_core::predictions::{parse_csv, to_csv_string};
use wastebench_core::{Label, PredictionRecord};

fn label_of(b: bool) -> Label {
    if b {
        Label::Positive
    } else {
        Label::Negative
    }
}

fn records_strategy(max: usize) -> impl Strategy<Value = Vec<PredictionRecord>> {
    prop::collection::vec((0u32..=20, any::<bool>()), 1..=max).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (q, truth))| {
                let p = f64::from(q) / 20.0;
                PredictionRecord::new(format!("img{i:03}"), 1.0 - p, p).with_label(label_of(truth))
            })
            .collect()
    })
}

/// Pair-counting AUC: fraction of (event, non-event) pairs ranked correctly,
/// ties counting one half.
fn mann_whitney(records: &[PredictionRecord], reference: Label) -> Option<f64> {
    let events: Vec<f64> = records
        .iter()
        .filter(|r| r.true_label == Some(reference))
        .map(|r| r.probability(reference))
        .collect();
    let others: Vec<f64> = records
        .iter()
        .filter(|r| r.true_label != Some(reference))
        .map(|r| r.probability(reference))
        .collect();
    if events.is_empty() || others.is_empty() {
        return None;
    }
    let mut score = 0.0;
    for &e in &events {
        for &o in &others {
            score += if e > o {
                1.0
            } else if e == o {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(score / (events.len() * others.len()) as f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn auc_matches_pair_count(records in records_strategy(20)) {
        for reference in Label::ALL {
            match mann_whitney(&records, reference) {
                Some(expected) => {
                    let curve = roc_points(&records, reference).unwrap();
                    prop_assert!((auc(&curve).unwrap() - expected).abs() < 1e-9);
                }
                None => prop_assert!(roc_points(&records, reference).is_err()),
            }
        }
    }

    #[test]
    fn roc_curves_are_monotone(records in records_strategy(30)) {
        if let Ok(curve) = roc_points(&records, Label::Positive) {
            prop_assert!(curve.validate().is_ok());
            prop_assert_eq!(curve.points.len(), curve.thresholds.len());
        }
    }

    #[test]
    fn binary_duality(records in records_strategy(50)) {
        let pos = class_metrics(&confusion(&records, Label::Positive).unwrap()).unwrap();
        let neg = class_metrics(&confusion(&records, Label::Negative).unwrap()).unwrap();
        prop_assert_eq!(pos.sensitivity, neg.specificity);
        prop_assert_eq!(pos.specificity, neg.sensitivity);
        prop_assert_eq!(pos.accuracy, neg.accuracy);
    }

    #[test]
    fn weighted_average_is_bounded(records in records_strategy(50)) {
        let pos = class_metrics(&confusion(&records, Label::Positive).unwrap()).unwrap();
        let neg = class_metrics(&confusion(&records, Label::Negative).unwrap()).unwrap();
        let w = weighted_average(&[pos.clone(), neg.clone()]).unwrap();
        for m in Metric::ALL {
            let (lo, hi) = (pos.get(m).min(neg.get(m)), pos.get(m).max(neg.get(m)));
            prop_assert!(w.get(m) >= lo - 1e-12 && w.get(m) <= hi + 1e-12);
        }
    }

    #[test]
    fn decisions_survive_monotone_rescaling(records in records_strategy(40), power in 0.2f64..5.0, offset in 0.0f64..3.0) {
        let g = |p: f64| p.powf(power) + offset;
        let rescaled: Vec<PredictionRecord> = records
            .iter()
            .map(|r| {
                let (n, p) = (g(r.p_negative), g(r.p_positive));
                PredictionRecord { p_negative: n / (n + p), p_positive: p / (n + p), ..r.clone() }
            })
            .collect();
        for tie_break in Label::ALL {
            let rule = DecisionRule { tie_break };
            for (a, b) in records.iter().zip(&rescaled) {
                prop_assert_eq!(a.decide(tie_break), b.decide(tie_break));
            }
            prop_assert_eq!(
                confusion_with(&records, Label::Positive, rule).unwrap(),
                confusion_with(&rescaled, Label::Positive, rule).unwrap()
            );
        }
    }

    #[test]
    fn csv_round_trip(rows in prop::collection::vec((0u32..=1_000_000, prop::option::of(any::<bool>())), 0..40)) {
        let records: Vec<PredictionRecord> = rows
            .iter()
            .enumerate()
            .map(|(i, &(micro, label))| {
                let p = f64::from(micro) / 1e6;
                let mut r = PredictionRecord::new(format!("tile_{:04}.png", (i * 7919) % 10007), 1.0 - p, p);
                r.true_label = label.map(label_of);
                r
            })
            .collect();
        let first = to_csv_string(&records);
        let second = to_csv_string(&parse_csv(&first).unwrap());
        prop_assert_eq!(first, second);
    }
}

fn aligned_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, usize)> {
    (2usize..=5, 1usize..=8).prop_flat_map(|(models, rows)| {
        (prop::collection::vec(prop::collection::vec(0.0f64..=1.0, rows), models), Just(rows))
    })
}

fn files_from(table: &[Vec<f64>]) -> Vec<Vec<PredictionRecord>> {
    table
        .iter()
        .map(|col| {
            col.iter()
                .enumerate()
                .map(|(i, &p)| PredictionRecord::new(format!("f{i}"), 1.0 - p, p))
                .collect()
        })
        .collect()
}

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("model{i}")).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn fusion_algebra((table, rows) in aligned_strategy(), rotate in 0usize..5) {
        let files = files_from(&table);
        let fused = average_fuse(&align(&files, &names(files.len()), AlignOptions::default()).unwrap());
        prop_assert_eq!(fused.len(), rows);

        let mut permuted = files.clone();
        permuted.rotate_left(rotate % files.len());
        permuted.reverse();
        let again = average_fuse(&align(&permuted, &names(files.len()), AlignOptions::default()).unwrap());
        prop_assert_eq!(&fused, &again);

        for (i, r) in fused.iter().enumerate() {
            let pos: Vec<f64> = files.iter().map(|f| f[i].p_positive).collect();
            let neg: Vec<f64> = files.iter().map(|f| f[i].p_negative).collect();
            let within = |v: f64, xs: &[f64]| {
                v >= xs.iter().copied().fold(f64::INFINITY, f64::min) && v <= xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            };
            prop_assert!(within(r.p_positive, &pos));
            prop_assert!(within(r.p_negative, &neg));
            prop_assert!((r.p_negative + r.p_positive - 1.0).abs() <= 1e-9);
            let votes: Vec<Label> = files.iter().map(|f| f[i].decide(Label::Negative)).collect();
            if votes.iter().all(|&v| v == votes[0]) {
                prop_assert_eq!(r.decide(Label::Negative), votes[0]);
            }
        }
    }

    #[test]
    fn fusion_replication_is_identity(col in prop::collection::vec(0.0f64..=1.0, 1..10), k in 2usize..6) {
        let file = files_from(&[col]).remove(0);
        let files = vec![file.clone(); k];
        let fused = average_fuse(&align(&files, &names(k), AlignOptions::default()).unwrap());
        prop_assert_eq!(fused, file);
    }
}

fn manifest(pos: usize, neg: usize, test: usize) -> DatasetManifest {
    let mut records = Vec::new();
    for (label, n, prefix) in [(Label::Positive, pos, "p"), (Label::Negative, neg, "n")] {
        for i in 0..n {
            records.push(ImageRecord {
                image_id: format!("{prefix}{i:04}"),
                path: format!("{prefix}{i}.png"),
                source: ImageSource::Agea,
                label,
                split: if i < test { Split::Test } else { Split::Unassigned },
            });
        }
    }
    DatasetManifest::new(records).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn splits_are_deterministic_and_stratified(pos in 1usize..300, neg in 1usize..300, test in 0usize..5, fraction in 0.05f64..0.95, seed: u64) {
        let m = manifest(pos, neg, test);
        let a = make_splits(&m, fraction, seed).unwrap();
        let b = make_splits(&m, fraction, seed).unwrap();
        prop_assert_eq!(&a.assignments, &b.assignments);
        prop_assert_eq!(a.assignments.len(), m.len());
        for r in m.records() {
            if r.split == Split::Test {
                prop_assert_eq!(a.assignments[&r.image_id], Split::Test);
            }
        }
        for label in Label::ALL {
            let pool: Vec<&ImageRecord> = m.records().iter().filter(|r| r.label == label && r.split != Split::Test).collect();
            let val = pool.iter().filter(|r| a.assignments[&r.image_id] == Split::Validation).count();
            let expected = (fraction * pool.len() as f64).round() as i64;
            prop_assert!((val as i64 - expected).abs() <= 1);
        }
    }

    #[test]
    fn corrections_conserve_records(n in 2usize..60, flips in prop::collection::btree_set(0usize..60, 0..10)) {
        let m = manifest(n, n, 0);
        let corrections: Vec<LabelCorrection> = flips
            .iter()
            .filter(|&&i| i < n)
            .map(|&i| LabelCorrection {
                image_id: format!("p{i:04}"),
                old_label: Label::Positive,
                new_label: Label::Negative,
                note: String::new(),
            })
            .collect();
        let (after, audit) = apply_corrections(&m, &corrections).unwrap();
        prop_assert_eq!(after.len(), m.len());
        prop_assert_eq!(audit.len(), corrections.len());
        prop_assert_eq!(after.count(Label::Positive), n - corrections.len());
        for (a, b) in m.records().iter().zip(after.records()) {
            prop_assert_eq!(&a.image_id, &b.image_id);
            prop_assert_eq!(&a.path, &b.path);
        }
    }

    #[test]
    fn balancing_equalizes(pos in 1usize..=500, neg in 1usize..=500) {
        let mut m = manifest(pos, neg, 0);
        let records: Vec<ImageRecord> = m.records().iter().cloned().map(|r| ImageRecord { split: Split::Train, ..r }).collect();
        m = DatasetManifest::new(records).unwrap();
        let plan = balance(&m).unwrap();
        let after = plan.apply_to_manifest(&m).unwrap();
        prop_assert_eq!(after.count(Label::Positive), after.count(Label::Negative));
        let copies: Vec<usize> = plan.copies_per_source.values().copied().collect();
        let (lo, hi) = (copies.iter().min().unwrap(), copies.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
        for extra in plan.generated_records(&m) {
            let (source, _) = extra.image_id.split_once("__aug").unwrap();
            prop_assert_eq!(m.get(source).unwrap().label, plan.minority_label);
        }
    }

    #[test]
    fn epoch_stream_is_reproducible(seed: u64, epoch in 0u64..1000) {
        let ranges = AugmentationRanges::default();
        let ids: Vec<String> = (0..16).map(|i| format!("id{i}")).collect();
        let a: Vec<_> = ids.iter().map(|id| sample_augmentation(seed, id, epoch, &ranges)).collect();
        let b: Vec<_> = ids.iter().rev().map(|id| sample_augmentation(seed, id, epoch, &ranges)).collect();
        let b: Vec<_> = b.into_iter().rev().collect();
        prop_assert_eq!(a, b);
    }
}

fn noise_image(seed: u64, w: u32, h: u32) -> RgbImage {
    let mut state = seed | 1;
    RgbImage::from_fn(w, h, |_, _| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        let b = state.to_le_bytes();
        Rgb([b[0], b[1], b[2]])
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn normalization_round_trip(seed: u64) {
        let stats = NormalizationStats::new([0.3201, 0.3334, 0.2832], [0.2004, 0.1818, 0.1764]).unwrap();
        let image = noise_image(seed, 256, 256);
        let back = denormalize(&model_input(&image, &stats), &stats);
        for (x, y, p) in back.enumerate_pixels() {
            let q = image.get_pixel(x + 16, y + 16);
            for c in 0..3 {
                prop_assert!((i16::from(p[c]) - i16::from(q[c])).abs() <= 1);
            }
        }
    }

    #[test]
    fn standardize_is_idempotent(seed: u64, w in 32u32..400, h in 32u32..400) {
        let once = standardize(&DynamicImage::ImageRgb8(noise_image(seed, w, h))).unwrap();
        let twice = standardize(&DynamicImage::ImageRgb8(once.clone())).unwrap();
        prop_assert_eq!(once, twice);
    }
}

#[test]
fn class_counts_of_split_manifest() {
    let m = manifest(40, 60, 5);
    let plan = make_splits(&m, 0.2, 11).unwrap();
    let split = m.with_plan(&plan).unwrap();
    let counts: BTreeMap<Split, usize> = split.split_counts();
    assert_eq!(counts[&Split::Test], 10);
    assert_eq!(counts[&Split::Validation], 18);
    assert_eq!(counts[&Split::Train], 72);
}
