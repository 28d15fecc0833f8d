//! Anomaly score maps, image scores and ROC-AUC.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::imgproc::{gaussian_blur, minmax_normalize, minmax_normalize_slice, ImageTensor, MaskMap};

/// Blur width for a given input height: 4 at 352 pixels, scaled
/// proportionally, never below 1.
pub fn default_sigma(height: usize) -> f64 {
    (height as f64 / 352.0 * 4.0).max(1.0)
}

/// `(S_map, S_final)`: blurred mean-over-RGB squared error and its
/// per-image min-max normalization.
pub fn pixel_score_map(i: &ImageTensor, r: &ImageTensor, sigma: f64) -> Result<(MaskMap, MaskMap)> {
    if i.shape() != r.shape() {
        return invalid(format!("shape mismatch: {:?} vs {:?}", i.shape(), r.shape()));
    }
    let (c, h, w) = i.shape();
    let mut err = vec![0.0; h * w];
    for ch in 0..c {
        for ((e, a), b) in err.iter_mut().zip(i.plane(ch)).zip(r.plane(ch)) {
            *e += (a - b) * (a - b);
        }
    }
    err.iter_mut().for_each(|e| *e /= c as f64);
    let s_map = gaussian_blur(&MaskMap::new(h, w, err)?, sigma)?;
    let s_final = minmax_normalize(&s_map);
    Ok((s_map, s_final))
}

pub fn image_score(s_map: &MaskMap) -> Result<f64> {
    if s_map.data().is_empty() {
        return invalid("empty score map");
    }
    Ok(s_map.max())
}

/// Dataset-level min-max normalization.
pub fn normalize_scores(scores: &[f64]) -> Vec<f64> {
    minmax_normalize_slice(scores)
}

/// Mann-Whitney AUC with ties counted as one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return invalid(format!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return invalid(format!("score {s} is not comparable"));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both positive and negative samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the U statistic keeps half-counted ties integral.
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let p = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        let n = (j - i) as u128 - p;
        twice_u += 2 * p * neg_below + p * n;
        neg_below += n;
        i = j;
    }
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredImage {
    pub name: String,
    pub category: String,
    /// Raw `S_map` before normalization.
    pub s_map: MaskMap,
    /// Per-image normalized `S_final`.
    pub score_map: MaskMap,
    /// Maximum of `s_map`.
    pub image_score: f64,
    pub gt_mask: Option<MaskMap>,
    /// `Some(true)` for abnormal images.
    pub gt_label: Option<bool>,
}

impl ScoredImage {
    pub fn new(name: impl Into<String>, category: impl Into<String>, s_map: MaskMap) -> Result<Self> {
        let image_score = image_score(&s_map)?;
        Ok(Self {
            name: name.into(),
            category: category.into(),
            score_map: minmax_normalize(&s_map),
            s_map,
            image_score,
            gt_mask: None,
            gt_label: None,
        })
    }

    fn label(&self) -> Option<bool> {
        self.gt_label
            .or_else(|| self.gt_mask.as_ref().map(|m| m.data().iter().any(|&v| v > 0.5)))
    }

    /// Pixel labels; normal images without a mask count as all negative.
    fn pixel_labels(&self) -> Option<Vec<bool>> {
        match (&self.gt_mask, self.label()) {
            (Some(m), _) if (m.height(), m.width()) == (self.s_map.height(), self.s_map.width()) => {
                Some(m.data().iter().map(|&v| v > 0.5).collect())
            }
            (None, Some(false)) => Some(vec![false; self.s_map.data().len()]),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelAucMode {
    /// One AUC over the pixels of every image.
    #[default]
    Pooled,
    /// Mean of per-image AUCs over images containing both classes.
    PerImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub pixel_auc: Option<f64>,
    pub image_auc: Option<f64>,
    pub n_images: usize,
}

/// Metrics that cannot be computed are `None` (JSON `null`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub pixel_auc: Option<f64>,
    pub image_auc: Option<f64>,
    pub categories: BTreeMap<String, CategoryReport>,
    pub n_images: usize,
}

fn pixel_auc(items: &[&ScoredImage], mode: PixelAucMode) -> Option<f64> {
    let labelled: Vec<(&ScoredImage, Vec<bool>)> = items
        .iter()
        .map(|it| it.pixel_labels().map(|l| (*it, l)))
        .collect::<Option<_>>()?;
    match mode {
        PixelAucMode::Pooled => {
            let scores: Vec<f64> = labelled.iter().flat_map(|(it, _)| it.s_map.data().iter().copied()).collect();
            let labels: Vec<bool> = labelled.into_iter().flat_map(|(_, l)| l).collect();
            roc_auc(&scores, &labels).ok()
        }
        PixelAucMode::PerImage => {
            let aucs: Vec<f64> = labelled
                .iter()
                .filter_map(|(it, l)| roc_auc(it.s_map.data(), l).ok())
                .collect();
            (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64)
        }
    }
}

fn image_auc(items: &[&ScoredImage]) -> Option<f64> {
    let labels: Vec<bool> = items.iter().map(|it| it.label()).collect::<Option<_>>()?;
    let scores = normalize_scores(&items.iter().map(|it| it.image_score).collect::<Vec<_>>());
    roc_auc(&scores, &labels).ok()
}

pub fn evaluate(items: &[ScoredImage], mode: PixelAucMode) -> Report {
    let all: Vec<&ScoredImage> = items.iter().collect();
    let mut by_cat: BTreeMap<String, Vec<&ScoredImage>> = BTreeMap::new();
    for it in items {
        by_cat.entry(it.category.clone()).or_default().push(it);
    }
    let categories = by_cat
        .into_iter()
        .map(|(name, its)| {
            let rep = CategoryReport {
                pixel_auc: pixel_auc(&its, mode),
                image_auc: image_auc(&its),
                n_images: its.len(),
            };
            (name, rep)
        })
        .collect();
    Report {
        pixel_auc: pixel_auc(&all, mode),
        image_auc: image_auc(&all),
        categories,
        n_images: items.len(),
    }
}

const TSMP_MAGIC: &[u8; 4] = b"TSMP";

/// `TSMP`, `u32` height, `u32` width, row-major `f32`, all little endian.
pub fn encode_raw_map(map: &MaskMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * map.data().len());
    out.extend_from_slice(TSMP_MAGIC);
    out.extend_from_slice(&(map.height() as u32).to_le_bytes());
    out.extend_from_slice(&(map.width() as u32).to_le_bytes());
    for &v in map.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_raw_map(bytes: &[u8]) -> Result<MaskMap> {
    if bytes.len() < 12 || &bytes[..4] != TSMP_MAGIC {
        return Err(Error::Format("not a TSMP score map".into()));
    }
    let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]) as usize;
    let (h, w) = (word(4), word(8));
    if bytes.len() != 12 + 4 * h * w {
        return Err(Error::Format(format!("TSMP payload does not match {h}x{w}")));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    MaskMap::new(h, w, data)
}

pub fn write_raw_map(map: &MaskMap, path: &Path) -> Result<()> {
    fs::write(path, encode_raw_map(map)).map_err(|e| Error::io(path, e))
}

pub fn read_raw_map(path: &Path) -> Result<MaskMap> {
    decode_raw_map(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// 16-bit grayscale PNG with value `round(score * 65535)`.
pub fn write_score_png(map: &MaskMap, path: &Path) -> Result<()> {
    let pixels: Vec<u16> = map.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(map.width() as u32, map.height() as u32, pixels)
        .ok_or_else(|| Error::Format("score map buffer size mismatch".into()))?;
    img.save(path).map_err(|e| Error::Codec {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
