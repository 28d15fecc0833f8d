//! Superpixel random filling: paint a fixed number of randomly chosen
//! superpixels with random solid colours and record where.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::imgproc::{ImageTensor, MaskMap};
use crate::par::{self, Exec};
use crate::slic::{slic_segment, SlicParams, SuperpixelSegmentation};

static SURF_CALLS: AtomicUsize = AtomicUsize::new(0);

/// How many SURF transforms have run in this process.
pub fn surf_invocations() -> usize {
    SURF_CALLS.load(Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurfConfig {
    /// Superpixels per image.
    pub n_segments: usize,
    /// Superpixels filled per image.
    pub fill_count: usize,
    pub seed: u64,
}

impl Default for SurfConfig {
    fn default() -> Self {
        Self {
            n_segments: 400,
            fill_count: 50,
            seed: 0,
        }
    }
}

impl SurfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_segments == 0 {
            return invalid("SURF n_segments must be at least 1");
        }
        if self.fill_count > self.n_segments {
            return invalid(format!(
                "SURF fill_count {} exceeds n_segments {}",
                self.fill_count, self.n_segments
            ));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// A corrupted training input together with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfSample {
    pub original: ImageTensor,
    pub distorted: ImageTensor,
    /// 1 exactly on the filled superpixels.
    pub mask: MaskMap,
    /// Sorted labels of the filled superpixels.
    pub filled_labels: Vec<u32>,
}

impl SurfSample {
    /// An uncorrupted sample (used when SURF is switched off).
    pub fn identity(img: &ImageTensor) -> Self {
        Self {
            original: img.clone(),
            distorted: img.clone(),
            mask: MaskMap::zeros(img.height(), img.width()),
            filled_labels: Vec::new(),
        }
    }
}

/// Fill `min(fill_count, K)` distinct superpixels of `seg`, each with one
/// uniform random colour.
pub fn surf_transform(img: &ImageTensor, seg: &SuperpixelSegmentation, cfg: &SurfConfig) -> Result<SurfSample> {
    cfg.validate()?;
    if (img.height(), img.width()) != (seg.height, seg.width) {
        return invalid(format!(
            "image {}x{} does not match segmentation {}x{}",
            img.height(),
            img.width(),
            seg.height,
            seg.width
        ));
    }
    SURF_CALLS.fetch_add(1, Ordering::Relaxed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let count = cfg.fill_count.min(seg.num_segments);
    let mut chosen: Vec<u32> = index::sample(&mut rng, seg.num_segments, count)
        .into_iter()
        .map(|l| l as u32)
        .collect();
    chosen.sort_unstable();

    let channels = img.channels();
    // colour[label] for filled labels, drawn in sorted-label order.
    let mut colours: Vec<Option<Vec<f64>>> = vec![None; seg.num_segments];
    for &l in &chosen {
        colours[l as usize] = Some((0..channels).map(|_| rng.random::<f64>()).collect());
    }

    let (h, w) = (img.height(), img.width());
    let mut distorted = img.clone();
    let mut mask = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            if let Some(colour) = &colours[seg.label(y, x) as usize] {
                mask[y * w + x] = 1.0;
                for (c, &v) in colour.iter().enumerate() {
                    distorted.set(c, y, x, v);
                }
            }
        }
    }
    Ok(SurfSample {
        original: img.clone(),
        distorted,
        mask: MaskMap::new(h, w, mask)?,
        filled_labels: chosen,
    })
}

/// Segment `img` with `cfg.n_segments` superpixels and fill.
pub fn surf_sample(img: &ImageTensor, cfg: &SurfConfig) -> Result<SurfSample> {
    cfg.validate()?;
    let seg = slic_segment(img, &SlicParams::with_segments(cfg.n_segments))?;
    surf_transform(img, &seg, cfg)
}

/// Independent SURF draws for a batch. One seed per image is taken from
/// `rng` in order, so the result does not depend on `exec`.
pub fn surf_batch<R: RngCore>(imgs: &[ImageTensor], cfg: &SurfConfig, rng: &mut R, exec: Exec) -> Result<Vec<SurfSample>> {
    if imgs.is_empty() {
        return invalid("SURF batch is empty");
    }
    let seeds: Vec<u64> = imgs.iter().map(|_| rng.next_u64()).collect();
    par::map_range(exec, imgs.len(), |i| surf_sample(&imgs[i], &cfg.with_seed(seeds[i])))
        .into_iter()
        .collect()
}
