//! Dataset layout, synthetic datasets and PNG codecs.
//!
//! A category lives at `<root>/<category>/` with `train/good/*.png`,
//! `test/<defect type>/*.png` and `ground_truth/<defect type>/<stem>_mask.png`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::imgproc::{ImageTensor, MaskMap};

pub const GOOD: &str = "good";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetItem {
    pub image: PathBuf,
    pub split: Split,
    pub defect_type: String,
    pub gt_mask: Option<PathBuf>,
    /// Abnormal test image whose mask file was not found.
    pub missing_mask: bool,
}

impl DatasetItem {
    pub fn is_abnormal(&self) -> bool {
        self.defect_type != GOOD
    }

    /// `<defect type>/<file name>`, unique within a split.
    pub fn relative_name(&self) -> String {
        let file = self.image.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        format!("{}/{}", self.defect_type, file)
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect())
}

fn require_dir(path: PathBuf) -> Result<PathBuf> {
    if path.is_dir() {
        Ok(path)
    } else {
        invalid(format!("expected directory {}", path.display()))
    }
}

/// Items of one category in lexicographic order: train first, then test
/// by defect type.
pub fn scan_dataset(root: &Path, category: &str) -> Result<Vec<DatasetItem>> {
    let base = root.join(category);
    let train = require_dir(base.join("train").join(GOOD))?;
    let test = require_dir(base.join("test"))?;
    let mut items: Vec<DatasetItem> = pngs(&train)?
        .into_iter()
        .map(|image| DatasetItem {
            image,
            split: Split::Train,
            defect_type: GOOD.into(),
            gt_mask: None,
            missing_mask: false,
        })
        .collect();
    for dir in sorted_entries(&test)?.into_iter().filter(|p| p.is_dir()) {
        let defect_type = dir.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        for image in pngs(&dir)? {
            let (gt_mask, missing_mask) = if defect_type == GOOD {
                (None, false)
            } else {
                let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let mask = base.join("ground_truth").join(&defect_type).join(format!("{stem}_mask.png"));
                if mask.is_file() {
                    (Some(mask), false)
                } else {
                    log::warn!("no ground-truth mask for {}", image.display());
                    (None, true)
                }
            };
            items.push(DatasetItem {
                image,
                split: Split::Test,
                defect_type: defect_type.clone(),
                gt_mask,
                missing_mask,
            });
        }
    }
    Ok(items)
}

fn codec_err(path: &Path, e: impl ToString) -> Error {
    Error::Codec {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| codec_err(path, e))
}

fn is_8bit(img: &DynamicImage) -> bool {
    matches!(
        img,
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_)
    )
}

/// RGB image scaled to `[0, 1]`; grayscale files are replicated to three
/// channels.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let interleaved: Vec<f64> = if is_8bit(&img) {
        img.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect()
    } else {
        img.to_rgb16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()
    };
    let mut data = vec![0.0; 3 * h * w];
    for (p, px) in interleaved.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + p] = px[c];
        }
    }
    ImageTensor::new(3, h, w, data)
}

/// Luma scaled to `[0, 1]` without thresholding.
pub fn load_gray(path: &Path) -> Result<MaskMap> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = if is_8bit(&img) {
        img.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect()
    } else {
        img.to_luma16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()
    };
    MaskMap::new(h, w, data)
}

/// Binary mask: luma above one half is foreground.
pub fn load_mask(path: &Path) -> Result<MaskMap> {
    Ok(load_gray(path)?.binarized(0.5))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit PNG: one channel as grayscale, three as RGB.
pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    let (c, h, w) = img.shape();
    let (wu, hu) = (w as u32, h as u32);
    let result = match c {
        1 => ImageBuffer::<Luma<u8>, _>::from_raw(wu, hu, img.data().iter().map(|&v| quantize(v)).collect::<Vec<u8>>())
            .map(|b| b.save(path)),
        3 => {
            let mut raw = Vec::with_capacity(3 * h * w);
            for p in 0..h * w {
                for ch in 0..3 {
                    raw.push(quantize(img.data()[ch * h * w + p]));
                }
            }
            ImageBuffer::<Rgb<u8>, _>::from_raw(wu, hu, raw).map(|b| b.save(path))
        }
        _ => return invalid(format!("cannot save a {c}-channel image as PNG")),
    };
    result
        .ok_or_else(|| codec_err(path, "buffer size mismatch"))?
        .map_err(|e| codec_err(path, e))
}

pub fn save_mask(mask: &MaskMap, path: &Path) -> Result<()> {
    let img = ImageTensor::new(1, mask.height(), mask.width(), mask.data().to_vec())?;
    save_image(&img, path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Stripes,
    Checker,
    Blobs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectShape {
    Square,
    Ellipse,
}

impl DefectShape {
    fn name(self) -> &'static str {
        match self {
            DefectShape::Square => "square",
            DefectShape::Ellipse => "ellipse",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub category: String,
    pub image_size: usize,
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_abnormal: usize,
    pub texture: Texture,
    pub defect: DefectShape,
    /// Inclusive side (square) or diameter (ellipse) range in pixels.
    pub defect_size: [usize; 2],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            category: "stripes".into(),
            image_size: 64,
            n_train: 100,
            n_test_normal: 20,
            n_test_abnormal: 20,
            texture: Texture::Stripes,
            defect: DefectShape::Square,
            defect_size: [10, 18],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 {
            return invalid("synthetic dataset needs at least one training image");
        }
        let [lo, hi] = self.defect_size;
        if lo == 0 || lo > hi || hi >= self.image_size {
            return invalid(format!(
                "defect size range {lo}..={hi} must be non-empty and below image size {}",
                self.image_size
            ));
        }
        if self.category.is_empty() || self.category.contains(['/', '\\']) {
            return invalid("category must be a plain directory name");
        }
        Ok(())
    }
}

const STRIPE_PERIOD: f64 = 8.0;

/// Grey-brown textile-like base pattern with per-image phase jitter.
fn texture_image(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> ImageTensor {
    let n = cfg.image_size;
    let tint = [0.55, 0.5, 0.42];
    let phase_x: f64 = rng.random_range(0.0..STRIPE_PERIOD);
    let phase_y: f64 = rng.random_range(0.0..STRIPE_PERIOD);
    let blobs: Vec<(f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                rng.random_range(0.0..n as f64),
                rng.random_range(0.0..n as f64),
                rng.random_range(4.0..10.0),
            )
        })
        .collect();
    let mut data = vec![0.0; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let (xf, yf) = (x as f64, y as f64);
            let base = match cfg.texture {
                Texture::Stripes => (std::f64::consts::TAU * (xf + phase_x) / STRIPE_PERIOD).sin(),
                Texture::Checker => {
                    let cx = ((xf + phase_x) / (STRIPE_PERIOD / 2.0)).floor() as i64;
                    let cy = ((yf + phase_y) / (STRIPE_PERIOD / 2.0)).floor() as i64;
                    if (cx + cy).rem_euclid(2) == 0 { 1.0 } else { -1.0 }
                }
                Texture::Blobs => {
                    let s: f64 = blobs
                        .iter()
                        .map(|&(bx, by, r)| (-((xf - bx).powi(2) + (yf - by).powi(2)) / (2.0 * r * r)).exp())
                        .sum();
                    2.0 * s.min(1.0) - 1.0
                }
            };
            let noise = rng.random_range(-0.02..0.02);
            for c in 0..3 {
                data[c * n * n + y * n + x] = (tint[c] + 0.25 * base + noise).clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::new(3, n, n, data).expect("texture values are finite")
}

/// Saturated colour far from the grey texture.
fn defect_colour(rng: &mut ChaCha8Rng) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 6] = [
        [0.95, 0.1, 0.1],
        [0.1, 0.85, 0.15],
        [0.1, 0.2, 0.95],
        [0.95, 0.9, 0.1],
        [0.05, 0.05, 0.05],
        [0.9, 0.15, 0.9],
    ];
    PALETTE[rng.random_range(0..PALETTE.len())]
}

/// Paint one defect; returns its exact mask.
fn inject_defect(img: &mut ImageTensor, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> MaskMap {
    let n = cfg.image_size;
    let size = rng.random_range(cfg.defect_size[0]..=cfg.defect_size[1]);
    let y0 = rng.random_range(0..=n - size);
    let x0 = rng.random_range(0..=n - size);
    let colour = defect_colour(rng);
    let r = size as f64 / 2.0;
    let mut mask = vec![0.0; n * n];
    for y in y0..y0 + size {
        for x in x0..x0 + size {
            let inside = match cfg.defect {
                DefectShape::Square => true,
                DefectShape::Ellipse => {
                    let dy = y as f64 + 0.5 - (y0 as f64 + r);
                    let dx = x as f64 + 0.5 - (x0 as f64 + r);
                    dx * dx + dy * dy <= r * r
                }
            };
            if inside {
                mask[y * n + x] = 1.0;
                for (c, &v) in colour.iter().enumerate() {
                    img.set(c, y, x, v);
                }
            }
        }
    }
    MaskMap::new(n, n, mask).expect("mask values are binary")
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Write a category in the standard layout under `out_root`.
pub fn generate_synthetic(cfg: &SynthConfig, out_root: &Path) -> Result<()> {
    cfg.validate()?;
    let base = out_root.join(&cfg.category);
    let train = base.join("train").join(GOOD);
    let test_good = base.join("test").join(GOOD);
    mkdir(&train)?;
    mkdir(&test_good)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for i in 0..cfg.n_train {
        save_image(&texture_image(cfg, &mut rng), &train.join(format!("{i:03}.png")))?;
    }
    for i in 0..cfg.n_test_normal {
        save_image(&texture_image(cfg, &mut rng), &test_good.join(format!("{i:03}.png")))?;
    }
    if cfg.n_test_abnormal > 0 {
        let kind = cfg.defect.name();
        let test_bad = base.join("test").join(kind);
        let gt = base.join("ground_truth").join(kind);
        mkdir(&test_bad)?;
        mkdir(&gt)?;
        for i in 0..cfg.n_test_abnormal {
            let mut img = texture_image(cfg, &mut rng);
            let mask = inject_defect(&mut img, cfg, &mut rng);
            save_image(&img, &test_bad.join(format!("{i:03}.png")))?;
            save_mask(&mask, &gt.join(format!("{i:03}_mask.png")))?;
        }
    }
    Ok(())
}

/// Training images of a category.
pub fn load_train_images(root: &Path, category: &str) -> Result<Vec<ImageTensor>> {
    scan_dataset(root, category)?
        .iter()
        .filter(|it| it.split == Split::Train)
        .map(|it| load_image(&it.image))
        .collect()
}
