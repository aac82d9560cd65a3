//! Image standardization, normalization, augmentation and class balancing.

mod augment;
mod balance;

pub use augment::{
    apply_augmentation, augmentation_seed, sample_augmentation, AugmentationRanges,
    AugmentationSpec, CropWindow, Jitter, SeedTuple,
};
pub use balance::{augmented_id, balance, materialize_balance, BalancePlan};

use image::imageops::{self, FilterType};
use image::{DynamicImage, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Side length of standardized rasters.
pub const STANDARD_SIZE: u32 = 256;
/// Side length of model inputs.
pub const MODEL_INPUT_SIZE: u32 = 224;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("undecodable image: {0}")]
    UndecodableImage(String),
    #[error("crop window {x},{y} {w}x{h} does not fit a {size}x{size} frame")]
    InvalidCropWindow {
        x: u32,
        y: u32,
        w: u32,
        h: u32,
        size: u32,
    },
    #[error("class {0} has no training records to balance")]
    EmptyClass(crate::Label),
    #[error("invalid normalization stats: {0}")]
    InvalidStats(String),
    #[error("augmentation ranges: {0}")]
    InvalidRanges(String),
    #[error("{0}")]
    Manifest(#[from] crate::manifest::ManifestError),
    #[error("image io error on {path}: {reason}")]
    Io { path: String, reason: String },
}

/// Per-channel mean and standard deviation in RGB order, on the `[0, 1]`
/// pixel scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormalizationStats {
    pub fn new(mean: [f64; 3], std: [f64; 3]) -> Result<Self, PipelineError> {
        let stats = NormalizationStats { mean, std };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(PipelineError::InvalidStats(format!(
                "std components must be finite and > 0, got {:?}",
                self.std
            )));
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            return Err(PipelineError::InvalidStats(format!(
                "mean components must be finite, got {:?}",
                self.mean
            )));
        }
        Ok(())
    }
}

/// Decode an encoded image and standardize it.
pub fn standardize_bytes(bytes: &[u8]) -> Result<RgbImage, PipelineError> {
    let image = image::load_from_memory(bytes)
        .map_err(|e| PipelineError::UndecodableImage(e.to_string()))?;
    standardize(&image)
}

pub fn load_standardized(path: &std::path::Path) -> Result<RgbImage, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| PipelineError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    standardize_bytes(&bytes)
        .map_err(|e| PipelineError::UndecodableImage(format!("{}: {e}", path.display())))
}

/// Convert to three channels (grayscale replicated) and resize directly to
/// 256x256. Rasters already at 256x256 RGB pass through unchanged.
pub fn standardize(image: &DynamicImage) -> Result<RgbImage, PipelineError> {
    if image.width() == 0 || image.height() == 0 {
        return Err(PipelineError::UndecodableImage("empty raster".into()));
    }
    let rgb = image.to_rgb8();
    if rgb.dimensions() == (STANDARD_SIZE, STANDARD_SIZE) {
        return Ok(rgb);
    }
    Ok(imageops::resize(&rgb, STANDARD_SIZE, STANDARD_SIZE, FilterType::Triangle))
}

/// Channel-major (`3 x 224 x 224`) normalized model input.
///
/// Rasters of at least 224 pixels per side are center-cropped; smaller ones
/// are resized up to 224.
pub fn model_input(image: &RgbImage, stats: &NormalizationStats) -> Vec<f32> {
    let size = MODEL_INPUT_SIZE;
    let (w, h) = image.dimensions();
    let cropped;
    let view: &RgbImage = if w >= size && h >= size {
        if (w, h) == (size, size) {
            image
        } else {
            cropped = imageops::crop_imm(image, (w - size) / 2, (h - size) / 2, size, size).to_image();
            &cropped
        }
    } else {
        cropped = imageops::resize(image, size, size, FilterType::Triangle);
        &cropped
    };
    let plane = (size * size) as usize;
    let mut out = vec![0f32; 3 * plane];
    for (i, px) in view.pixels().enumerate() {
        for c in 0..3 {
            let v = (f64::from(px[c]) / 255.0 - stats.mean[c]) / stats.std[c];
            out[c * plane + i] = v as f32;
        }
    }
    out
}

/// Inverse of [`model_input`] on the cropped region.
pub fn denormalize(input: &[f32], stats: &NormalizationStats) -> RgbImage {
    let size = MODEL_INPUT_SIZE;
    let plane = (size * size) as usize;
    assert_eq!(input.len(), 3 * plane, "expected a 3x224x224 input");
    RgbImage::from_fn(size, size, |x, y| {
        let i = (y * size + x) as usize;
        let mut px = [0u8; 3];
        for c in 0..3 {
            let v = (f64::from(input[c * plane + i]) * stats.std[c] + stats.mean[c]) * 255.0;
            px[c] = v.round().clamp(0.0, 255.0) as u8;
        }
        image::Rgb(px)
    })
}
