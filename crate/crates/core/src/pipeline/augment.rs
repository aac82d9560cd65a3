//! Seeded augmentation: rotation, flips, color jitter and random crop.
//!
//! Every spec is a pure function of `(global_seed, image_id, epoch)`: the
//! triple is hashed with SHA-256 into a ChaCha key, so results do not depend
//! on the order or thread in which images are processed.

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{PipelineError, STANDARD_SIZE};

/// Sampling ranges for [`sample_augmentation`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationRanges {
    /// Rotation drawn uniformly from `[-max_rotation_degrees, max_rotation_degrees]`.
    pub max_rotation_degrees: f64,
    pub hflip_probability: f64,
    pub vflip_probability: f64,
    /// Brightness, contrast and saturation factors drawn from this interval.
    pub jitter_range: [f64; 2],
    /// Crop area as a fraction of the frame.
    pub crop_area_range: [f64; 2],
}

impl Default for AugmentationRanges {
    fn default() -> Self {
        AugmentationRanges {
            max_rotation_degrees: 30.0,
            hflip_probability: 0.5,
            vflip_probability: 0.5,
            jitter_range: [0.8, 1.2],
            crop_area_range: [0.8, 1.0],
        }
    }
}

impl AugmentationRanges {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |msg: &str| Err(PipelineError::InvalidRanges(msg.to_string()));
        if !(self.max_rotation_degrees >= 0.0 && self.max_rotation_degrees <= 180.0) {
            return bad("max_rotation_degrees must lie in [0, 180]");
        }
        for p in [self.hflip_probability, self.vflip_probability] {
            if !(0.0..=1.0).contains(&p) {
                return bad("flip probabilities must lie in [0, 1]");
            }
        }
        let [lo, hi] = self.jitter_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("jitter_range must be 0 < lo <= hi");
        }
        let [lo, hi] = self.crop_area_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad("crop_area_range must be 0 < lo <= hi <= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedTuple {
    pub global_seed: u64,
    pub image_id: String,
    pub epoch: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Jitter {
    pub const IDENTITY: Jitter = Jitter {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl CropWindow {
    pub const FULL: CropWindow = CropWindow {
        x: 0,
        y: 0,
        w: STANDARD_SIZE,
        h: STANDARD_SIZE,
    };

    fn validate(&self) -> Result<(), PipelineError> {
        let fits = self.w > 0
            && self.h > 0
            && self.x.checked_add(self.w).is_some_and(|r| r <= STANDARD_SIZE)
            && self.y.checked_add(self.h).is_some_and(|b| b <= STANDARD_SIZE);
        if fits {
            Ok(())
        } else {
            Err(PipelineError::InvalidCropWindow {
                x: self.x,
                y: self.y,
                w: self.w,
                h: self.h,
                size: STANDARD_SIZE,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    /// Counter-clockwise rotation about the image center.
    pub rotation_degrees: f64,
    pub hflip: bool,
    pub vflip: bool,
    pub jitter: Jitter,
    pub crop: CropWindow,
    pub seed_tuple: SeedTuple,
}

impl AugmentationSpec {
    pub fn identity(seed_tuple: SeedTuple) -> Self {
        AugmentationSpec {
            rotation_degrees: 0.0,
            hflip: false,
            vflip: false,
            jitter: Jitter::IDENTITY,
            crop: CropWindow::FULL,
            seed_tuple,
        }
    }
}

/// 256-bit ChaCha key for a seed triple.
pub fn augmentation_seed(global_seed: u64, image_id: &str, epoch: u64) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(b"wastebench/augment/v1");
    hasher.update(global_seed.to_le_bytes());
    hasher.update(epoch.to_le_bytes());
    hasher.update((image_id.len() as u64).to_le_bytes());
    hasher.update(image_id.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    key
}

pub fn sample_augmentation(
    global_seed: u64,
    image_id: &str,
    epoch: u64,
    ranges: &AugmentationRanges,
) -> AugmentationSpec {
    let mut rng = ChaCha8Rng::from_seed(augmentation_seed(global_seed, image_id, epoch));
    let r = ranges.max_rotation_degrees;
    let rotation_degrees = if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    let hflip = rng.random_bool(ranges.hflip_probability);
    let vflip = rng.random_bool(ranges.vflip_probability);
    let [jlo, jhi] = ranges.jitter_range;
    let mut factor = || if jhi > jlo { rng.random_range(jlo..=jhi) } else { jlo };
    let jitter = Jitter {
        brightness: factor(),
        contrast: factor(),
        saturation: factor(),
    };
    let [alo, ahi] = ranges.crop_area_range;
    let area = if ahi > alo { rng.random_range(alo..=ahi) } else { alo };
    let side = ((f64::from(STANDARD_SIZE) * area.sqrt()).round() as u32).clamp(1, STANDARD_SIZE);
    let slack = STANDARD_SIZE - side;
    let x = rng.random_range(0..=slack);
    let y = rng.random_range(0..=slack);
    AugmentationSpec {
        rotation_degrees,
        hflip,
        vflip,
        jitter,
        crop: CropWindow { x, y, w: side, h: side },
        seed_tuple: SeedTuple {
            global_seed,
            image_id: image_id.to_string(),
            epoch,
        },
    }
}

/// Apply `spec` in the fixed order rotate, flip, jitter, crop, resize back
/// to 256x256.
pub fn apply_augmentation(image: &RgbImage, spec: &AugmentationSpec) -> Result<RgbImage, PipelineError> {
    spec.crop.validate()?;
    if image.dimensions() != (STANDARD_SIZE, STANDARD_SIZE) {
        return Err(PipelineError::UndecodableImage(format!(
            "augmentation expects a {STANDARD_SIZE}x{STANDARD_SIZE} raster, got {:?}",
            image.dimensions()
        )));
    }
    let mut out = rotate(image, spec.rotation_degrees);
    if spec.hflip {
        imageops::flip_horizontal_in_place(&mut out);
    }
    if spec.vflip {
        imageops::flip_vertical_in_place(&mut out);
    }
    jitter(&mut out, &spec.jitter);
    if spec.crop != CropWindow::FULL {
        let c = spec.crop;
        let window = imageops::crop_imm(&out, c.x, c.y, c.w, c.h).to_image();
        out = imageops::resize(&window, STANDARD_SIZE, STANDARD_SIZE, FilterType::Triangle);
    }
    Ok(out)
}

fn rotate(image: &RgbImage, degrees: f64) -> RgbImage {
    let quarter = degrees / 90.0;
    if quarter == quarter.round() {
        return match (quarter as i64).rem_euclid(4) {
            0 => image.clone(),
            1 => imageops::rotate270(image),
            2 => imageops::rotate180(image),
            _ => imageops::rotate90(image),
        };
    }
    // Bilinear inverse mapping about the center, black fill outside.
    let (w, h) = image.dimensions();
    let (cx, cy) = ((f64::from(w) - 1.0) / 2.0, (f64::from(h) - 1.0) / 2.0);
    let (sin, cos) = degrees.to_radians().sin_cos();
    RgbImage::from_fn(w, h, |x, y| {
        let dx = f64::from(x) - cx;
        let dy = f64::from(y) - cy;
        // Output (x, y) samples the source point rotated clockwise back.
        let sx = cx + dx * cos - dy * sin;
        let sy = cy + dx * sin + dy * cos;
        bilinear(image, sx, sy)
    })
}

fn bilinear(image: &RgbImage, x: f64, y: f64) -> Rgb<u8> {
    let (w, h) = image.dimensions();
    if x < -0.5 || y < -0.5 || x > f64::from(w) - 0.5 || y > f64::from(h) - 0.5 {
        return Rgb([0, 0, 0]);
    }
    let x = x.clamp(0.0, f64::from(w - 1));
    let y = y.clamp(0.0, f64::from(h - 1));
    let (x0, y0) = (x.floor() as u32, y.floor() as u32);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - f64::from(x0), y - f64::from(y0));
    let mut px = [0u8; 3];
    for (c, slot) in px.iter_mut().enumerate() {
        let p = |xx, yy| f64::from(image.get_pixel(xx, yy)[c]);
        let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
        let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
        *slot = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
    }
    Rgb(px)
}

fn luma(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn jitter(image: &mut RgbImage, j: &Jitter) {
    if *j == Jitter::IDENTITY {
        return;
    }
    let n = f64::from(image.width()) * f64::from(image.height());
    let mean_gray = image
        .pixels()
        .map(|p| luma([f64::from(p[0]), f64::from(p[1]), f64::from(p[2])]))
        .sum::<f64>()
        / n
        * j.brightness;
    for px in image.pixels_mut() {
        let mut v = [f64::from(px[0]), f64::from(px[1]), f64::from(px[2])];
        for c in v.iter_mut() {
            *c = (*c * j.brightness).min(255.0);
        }
        for c in v.iter_mut() {
            *c = ((*c - mean_gray) * j.contrast + mean_gray).clamp(0.0, 255.0);
        }
        let gray = luma(v);
        for c in v.iter_mut() {
            *c = ((*c - gray) * j.saturation + gray).clamp(0.0, 255.0);
        }
        for c in 0..3 {
            px[c] = v[c].round() as u8;
        }
    }
}
