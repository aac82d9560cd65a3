//! Labeled image collections and the batch assembly used by training and
//! inference.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{DynamicImage, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;
use wastebench_core::manifest::Split;
use wastebench_core::pipeline::{
    apply_augmentation, load_standardized, model_input, sample_augmentation, standardize, AugmentationRanges,
    NormalizationStats, PipelineError, MODEL_INPUT_SIZE, STANDARD_SIZE,
};
use wastebench_core::Label;

use crate::tensor::Tensor;

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "tif", "tiff"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{name}: {source}")]
    Image {
        name: String,
        #[source]
        source: PipelineError,
    },
    #[error("duplicate sample name {0:?}")]
    DuplicateName(String),
}

#[derive(Debug, Clone)]
pub enum ImageRef {
    Memory(Arc<RgbImage>),
    File(PathBuf),
}

#[derive(Debug, Clone)]
pub struct Sample {
    /// File name used in prediction files and augmentation seeding.
    pub name: String,
    pub label: Option<Label>,
    pub image: ImageRef,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    samples: Vec<Sample>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let io = |source| DataError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.is_file() && is_image(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Dataset, DataError> {
        let mut seen = BTreeSet::new();
        for s in &samples {
            if !seen.insert(s.name.as_str()) {
                return Err(DataError::DuplicateName(s.name.clone()));
            }
        }
        Ok(Dataset { samples })
    }

    /// One split of a materialized `<root>/<split>/<label>/` tree.
    pub fn from_layout(root: &Path, split: Split) -> Result<Dataset, DataError> {
        Dataset::from_labeled_dir(&root.join(split.as_str()))
    }

    /// Images under `<dir>/negative` and `<dir>/positive`.
    pub fn from_labeled_dir(dir: &Path) -> Result<Dataset, DataError> {
        let mut samples = Vec::new();
        for label in Label::ALL {
            let sub = dir.join(label.folder_name());
            if !sub.is_dir() {
                continue;
            }
            for path in list_images(&sub)? {
                samples.push(Sample {
                    name: file_name(&path),
                    label: Some(label),
                    image: ImageRef::File(path),
                });
            }
        }
        if samples.is_empty() && !dir.is_dir() {
            return Err(DataError::Io {
                path: dir.display().to_string(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "directory not found"),
            });
        }
        Dataset::new(samples)
    }

    /// Images directly inside `dir`, without labels, or a labeled tree when
    /// `dir` has `negative`/`positive` subfolders.
    pub fn from_dir(dir: &Path) -> Result<Dataset, DataError> {
        if Label::ALL.iter().any(|l| dir.join(l.folder_name()).is_dir()) {
            return Dataset::from_labeled_dir(dir);
        }
        let samples = list_images(dir)?
            .into_iter()
            .map(|path| Sample {
                name: file_name(&path),
                label: None,
                image: ImageRef::File(path),
            })
            .collect();
        Dataset::new(samples)
    }

    /// Separable synthetic set: every image is textured noise with one
    /// square patch, bright for positives and dark for negatives. Classes
    /// alternate so any prefix is balanced.
    pub fn synthetic_bright_dark(n: usize, seed: u64) -> Dataset {
        let size = STANDARD_SIZE;
        let patch = size / 4;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|i| {
                let label = if i % 2 == 0 { Label::Positive } else { Label::Negative };
                let (lo, hi) = match label {
                    Label::Positive => (200u8, 255u8),
                    Label::Negative => (0u8, 40u8),
                };
                let (px, py) = (rng.random_range(0..=size - patch), rng.random_range(0..=size - patch));
                let mut img = RgbImage::new(size, size);
                for (x, y, p) in img.enumerate_pixels_mut() {
                    let inside = (px..px + patch).contains(&x) && (py..py + patch).contains(&y);
                    let mut channel = || {
                        if inside {
                            rng.random_range(lo..=hi)
                        } else {
                            rng.random_range(60u8..=140)
                        }
                    };
                    *p = Rgb([channel(), channel(), channel()]);
                }
                Sample {
                    name: format!("synthetic_{i:04}.png"),
                    label: Some(label),
                    image: ImageRef::Memory(Arc::new(img)),
                }
            })
            .collect();
        Dataset { samples }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.samples.iter().filter(|s| s.label == Some(label)).count()
    }

    /// Samples with indices in `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Copy of the dataset sorted by sample name.
    pub fn sorted_by_name(&self) -> Dataset {
        let mut samples = self.samples.clone();
        samples.sort_by(|a, b| a.name.cmp(&b.name));
        Dataset { samples }
    }

    /// Write every in-memory image as PNG under `<dir>/<label>/`.
    pub fn write_labeled_dir(&self, dir: &Path) -> Result<(), DataError> {
        for s in &self.samples {
            let sub = dir.join(s.label.map_or("unlabeled", Label::folder_name));
            fs::create_dir_all(&sub).map_err(|source| DataError::Io {
                path: sub.display().to_string(),
                source,
            })?;
            let img = load_sample(s)?;
            let path = sub.join(&s.name);
            img.save(&path).map_err(|e| DataError::Io {
                path: path.display().to_string(),
                source: std::io::Error::other(e),
            })?;
        }
        Ok(())
    }
}

fn load_sample(s: &Sample) -> Result<RgbImage, DataError> {
    let wrap = |source| DataError::Image {
        name: s.name.clone(),
        source,
    };
    match &s.image {
        ImageRef::Memory(img) => standardize(&DynamicImage::ImageRgb8((**img).clone())).map_err(wrap),
        ImageRef::File(path) => load_standardized(path).map_err(wrap),
    }
}

/// How images become model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct InputPipeline {
    pub stats: NormalizationStats,
    /// Online augmentation ranges; `None` disables augmentation.
    pub augmentation: Option<AugmentationRanges>,
    /// Classes that receive online augmentation during training.
    pub augment_labels: Vec<Label>,
    pub seed: u64,
}

impl InputPipeline {
    pub fn new(stats: NormalizationStats) -> InputPipeline {
        InputPipeline {
            stats,
            augmentation: None,
            augment_labels: vec![Label::Positive],
            seed: 0,
        }
    }

    /// Channel-major input of one sample. `epoch` selects training-time
    /// augmentation; `None` means evaluation.
    pub fn sample_input(&self, s: &Sample, epoch: Option<u64>) -> Result<Vec<f32>, DataError> {
        let mut img = load_sample(s)?;
        if let (Some(epoch), Some(ranges)) = (epoch, &self.augmentation) {
            if s.label.is_some_and(|l| self.augment_labels.contains(&l)) {
                let spec = sample_augmentation(self.seed, &s.name, epoch, ranges);
                img = apply_augmentation(&img, &spec).map_err(|source| DataError::Image {
                    name: s.name.clone(),
                    source,
                })?;
            }
        }
        Ok(model_input(&img, &self.stats))
    }

    /// `(B, 3, 224, 224)` batch of the given samples. Items are prepared in
    /// parallel and assembled in order.
    pub fn batch(&self, data: &Dataset, indices: &[usize], epoch: Option<u64>) -> Result<Tensor, DataError> {
        let items: Vec<Vec<f32>> = indices
            .par_iter()
            .map(|&i| self.sample_input(&data.samples[i], epoch))
            .collect::<Result<_, _>>()?;
        let refs: Vec<&[f32]> = items.iter().map(Vec::as_slice).collect();
        let side = MODEL_INPUT_SIZE as usize;
        Ok(Tensor::stack(&refs, &[3, side, side]))
    }
}
