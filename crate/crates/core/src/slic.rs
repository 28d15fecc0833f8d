//! SLIC superpixels: localized k-means in CIELAB + position space,
//! grid-initialized, followed by connectivity enforcement.

use std::collections::{BTreeSet, HashMap, VecDeque};

use crate::error::{invalid, Result};
use crate::imgproc::{rgb_to_lab, ImageTensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlicParams {
    /// Target number of superpixels.
    pub n_segments: usize,
    /// Weight of spatial against colour distance.
    pub compactness: f64,
    pub iterations: usize,
    /// Fragments smaller than this are merged into a neighbour. `None`
    /// uses half the nominal superpixel area.
    pub min_size: Option<usize>,
}

impl Default for SlicParams {
    fn default() -> Self {
        Self {
            n_segments: 400,
            compactness: 10.0,
            iterations: 10,
            min_size: None,
        }
    }
}

impl SlicParams {
    pub fn with_segments(n_segments: usize) -> Self {
        Self {
            n_segments,
            ..Self::default()
        }
    }

    fn validate(&self, pixels: usize) -> Result<()> {
        if self.n_segments == 0 {
            return invalid("n_segments must be at least 1");
        }
        if self.n_segments > pixels {
            return invalid(format!(
                "n_segments {} exceeds pixel count {pixels}",
                self.n_segments
            ));
        }
        if !(self.compactness > 0.0) {
            return invalid("compactness must be positive");
        }
        if self.iterations == 0 {
            return invalid("iterations must be at least 1");
        }
        Ok(())
    }
}

/// Cluster centre in (L, a, b, x, y) space.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClusterCenter {
    pub l: f64,
    pub a: f64,
    pub b: f64,
    pub x: f64,
    pub y: f64,
}

/// Dense label map; labels are `0..num_segments` and every label is used.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperpixelSegmentation {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub num_segments: usize,
    pub centers: Vec<ClusterCenter>,
}

impl SuperpixelSegmentation {
    #[inline]
    pub fn label(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Pixel count per label.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_segments];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// Number of pixels whose right or lower neighbour has another label.
    pub fn boundary_pixels(&self) -> usize {
        let (h, w) = (self.height, self.width);
        let mut count = 0;
        for y in 0..h {
            for x in 0..w {
                let l = self.label(y, x);
                let right = x + 1 < w && self.label(y, x + 1) != l;
                let down = y + 1 < h && self.label(y + 1, x) != l;
                if right || down {
                    count += 1;
                }
            }
        }
        count
    }

    /// Build a segmentation from a raw label map (any `u32` values). Labels
    /// are re-densified in raster order; centres carry positions only.
    pub fn from_labels(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width || labels.is_empty() {
            return invalid(format!(
                "label map length {} does not match {height}x{width}",
                labels.len()
            ));
        }
        let mut remap = HashMap::new();
        let dense: Vec<u32> = labels
            .iter()
            .map(|l| {
                let next = remap.len() as u32;
                *remap.entry(*l).or_insert(next)
            })
            .collect();
        let k = remap.len();
        let centers = position_centers(&dense, width, k);
        Ok(Self {
            height,
            width,
            labels: dense,
            num_segments: k,
            centers,
        })
    }
}

fn position_centers(labels: &[u32], width: usize, k: usize) -> Vec<ClusterCenter> {
    let mut acc = vec![(0.0, 0.0, 0usize); k];
    for (i, &l) in labels.iter().enumerate() {
        let e = &mut acc[l as usize];
        e.0 += (i % width) as f64;
        e.1 += (i / width) as f64;
        e.2 += 1;
    }
    acc.into_iter()
        .map(|(sx, sy, n)| ClusterCenter {
            x: sx / n.max(1) as f64,
            y: sy / n.max(1) as f64,
            ..Default::default()
        })
        .collect()
}

struct LabPixels<'a> {
    h: usize,
    w: usize,
    data: &'a [f64],
}

impl LabPixels<'_> {
    #[inline]
    fn at(&self, i: usize) -> [f64; 3] {
        let n = self.h * self.w;
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    fn gradient(&self, y: usize, x: usize) -> f64 {
        let (h, w) = (self.h, self.w);
        let c = |yy: usize, xx: usize| self.at(yy * w + xx);
        let d2 = |p: [f64; 3], q: [f64; 3]| {
            (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)
        };
        let gx = d2(c(y, (x + 1).min(w - 1)), c(y, x.saturating_sub(1)));
        let gy = d2(c((y + 1).min(h - 1), x), c(y.saturating_sub(1), x));
        gx + gy
    }
}

/// Segment an RGB (or grayscale, replicated) image into superpixels.
pub fn slic_segment(img: &ImageTensor, params: &SlicParams) -> Result<SuperpixelSegmentation> {
    let (h, w) = (img.height(), img.width());
    params.validate(h * w)?;
    let lab_img = rgb_to_lab(&img.to_rgb()?)?;
    let lab = LabPixels {
        h,
        w,
        data: lab_img.data(),
    };

    let step = ((h * w) as f64 / params.n_segments as f64).sqrt();
    let rows = ((h as f64 / step).round() as usize).clamp(1, h);
    let cols = ((w as f64 / step).round() as usize).clamp(1, w);
    let mut centers = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let cy = (((r as f64 + 0.5) * h as f64 / rows as f64) as usize).min(h - 1);
            let cx = (((c as f64 + 0.5) * w as f64 / cols as f64) as usize).min(w - 1);
            // Move to the lowest-gradient pixel of the 3x3 neighbourhood.
            let (mut by, mut bx) = (cy, cx);
            let mut best = lab.gradient(cy, cx);
            for ny in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                for nx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                    let g = lab.gradient(ny, nx);
                    if g < best {
                        best = g;
                        by = ny;
                        bx = nx;
                    }
                }
            }
            let [l, a, b] = lab.at(by * w + bx);
            centers.push(ClusterCenter {
                l,
                a,
                b,
                x: bx as f64,
                y: by as f64,
            });
        }
    }

    let spatial = (params.compactness / step).powi(2);
    let radius = step.ceil() as isize;
    let mut labels = vec![u32::MAX; h * w];
    let mut dist = vec![f64::INFINITY; h * w];
    for _ in 0..params.iterations {
        labels.fill(u32::MAX);
        dist.fill(f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let (cy, cx) = (c.y.round() as isize, c.x.round() as isize);
            let y0 = (cy - radius).max(0) as usize;
            let y1 = ((cy + radius) as usize).min(h - 1);
            let x0 = (cx - radius).max(0) as usize;
            let x1 = ((cx + radius) as usize).min(w - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let i = y * w + x;
                    let [l, a, b] = lab.at(i);
                    let dc = (l - c.l).powi(2) + (a - c.a).powi(2) + (b - c.b).powi(2);
                    let ds = (x as f64 - c.x).powi(2) + (y as f64 - c.y).powi(2);
                    let d = dc + ds * spatial;
                    if d < dist[i] {
                        dist[i] = d;
                        labels[i] = k as u32;
                    }
                }
            }
        }
        // Pixels outside every search window go to the spatially nearest centre.
        for i in 0..h * w {
            if labels[i] == u32::MAX {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                let nearest = centers
                    .iter()
                    .enumerate()
                    .map(|(k, c)| (k, (c.x - x).powi(2) + (c.y - y).powi(2)))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(k, _)| k)
                    .unwrap_or(0);
                labels[i] = nearest as u32;
            }
        }
        let mut acc = vec![[0.0f64; 6]; centers.len()];
        for (i, &l) in labels.iter().enumerate() {
            let [cl, ca, cb] = lab.at(i);
            let e = &mut acc[l as usize];
            e[0] += cl;
            e[1] += ca;
            e[2] += cb;
            e[3] += (i % w) as f64;
            e[4] += (i / w) as f64;
            e[5] += 1.0;
        }
        for (c, e) in centers.iter_mut().zip(&acc) {
            if e[5] > 0.0 {
                *c = ClusterCenter {
                    l: e[0] / e[5],
                    a: e[1] / e[5],
                    b: e[2] / e[5],
                    x: e[3] / e[5],
                    y: e[4] / e[5],
                };
            }
        }
    }

    let min_size = params
        .min_size
        .unwrap_or(((h * w) as f64 / params.n_segments as f64 / 2.0) as usize)
        .max(1);
    let raw = SuperpixelSegmentation {
        height: h,
        width: w,
        labels,
        num_segments: centers.len(),
        centers,
    };
    Ok(merge_fragments(&raw, min_size, Some(&lab)))
}

/// Split every label into 4-connected components and merge components
/// smaller than `min_size` into the neighbour sharing the longest boundary.
pub fn enforce_connectivity(seg: &SuperpixelSegmentation, min_size: usize) -> SuperpixelSegmentation {
    merge_fragments(seg, min_size, None)
}

fn merge_fragments(
    seg: &SuperpixelSegmentation,
    min_size: usize,
    lab: Option<&LabPixels<'_>>,
) -> SuperpixelSegmentation {
    let (h, w) = (seg.height, seg.width);
    let n = h * w;

    // 4-connected components in raster order.
    let mut comp = vec![usize::MAX; n];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let label = seg.labels[start];
        comp[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if comp[q] == usize::MAX && seg.labels[q] == label {
                    comp[q] = id;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        sizes.push(size);
    }

    let k = sizes.len();
    let mut adjacency: Vec<HashMap<usize, usize>> = vec![HashMap::new(); k];
    for y in 0..h {
        for x in 0..w {
            let a = comp[y * w + x];
            let mut link = |b: usize| {
                if a != b {
                    *adjacency[a].entry(b).or_insert(0) += 1;
                    *adjacency[b].entry(a).or_insert(0) += 1;
                }
            };
            if x + 1 < w {
                link(comp[y * w + x + 1]);
            }
            if y + 1 < h {
                link(comp[(y + 1) * w + x]);
            }
        }
    }

    let mut parent: Vec<usize> = (0..k).collect();
    let mut pending: BTreeSet<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .filter(|(_, &s)| s < min_size)
        .map(|(i, &s)| (s, i))
        .collect();
    while let Some((size, c)) = pending.pop_first() {
        let target = adjacency[c]
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&t, _)| t);
        let Some(t) = target else { continue };
        parent[c] = t;
        let moved = std::mem::take(&mut adjacency[c]);
        for (nbr, cnt) in moved {
            adjacency[nbr].remove(&c);
            if nbr != t {
                *adjacency[nbr].entry(t).or_insert(0) += cnt;
                *adjacency[t].entry(nbr).or_insert(0) += cnt;
            }
        }
        adjacency[t].remove(&c);
        let was_pending = pending.remove(&(sizes[t], t));
        sizes[t] += size;
        if was_pending && sizes[t] < min_size {
            pending.insert((sizes[t], t));
        }
    }

    let find = |mut c: usize| {
        while parent[c] != c {
            c = parent[c];
        }
        c
    };
    let mut dense = vec![u32::MAX; k];
    let mut next = 0u32;
    let mut labels = vec![0u32; n];
    for p in 0..n {
        let root = find(comp[p]);
        if dense[root] == u32::MAX {
            dense[root] = next;
            next += 1;
        }
        labels[p] = dense[root];
    }
    let num = next as usize;

    let centers = match lab {
        Some(lab) => {
            let mut acc = vec![[0.0f64; 6]; num];
            for (i, &l) in labels.iter().enumerate() {
                let [cl, ca, cb] = lab.at(i);
                let e = &mut acc[l as usize];
                e[0] += cl;
                e[1] += ca;
                e[2] += cb;
                e[3] += (i % w) as f64;
                e[4] += (i / w) as f64;
                e[5] += 1.0;
            }
            acc.iter()
                .map(|e| ClusterCenter {
                    l: e[0] / e[5],
                    a: e[1] / e[5],
                    b: e[2] / e[5],
                    x: e[3] / e[5],
                    y: e[4] / e[5],
                })
                .collect()
        }
        None => {
            // Colour of a merged region: pixel-weighted mean of the source
            // labels' centre colours.
            let mut acc = vec![[0.0f64; 4]; num];
            for (i, &l) in labels.iter().enumerate() {
                if let Some(c) = seg.centers.get(seg.labels[i] as usize) {
                    let e = &mut acc[l as usize];
                    e[0] += c.l;
                    e[1] += c.a;
                    e[2] += c.b;
                    e[3] += 1.0;
                }
            }
            position_centers(&labels, w, num)
                .into_iter()
                .zip(&acc)
                .map(|(mut c, e)| {
                    if e[3] > 0.0 {
                        c.l = e[0] / e[3];
                        c.a = e[1] / e[3];
                        c.b = e[2] / e[3];
                    }
                    c
                })
                .collect()
        }
    };

    SuperpixelSegmentation {
        height: h,
        width: w,
        labels,
        num_segments: num,
        centers,
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Flood-fill audit: every label forms exactly one 4-connected region.
    pub(crate) fn labels_connected(seg: &SuperpixelSegmentation) -> bool {
        let (h, w) = (seg.height, seg.width);
        let mut seen = vec![false; h * w];
        let mut started = vec![false; seg.num_segments];
        for s in 0..h * w {
            if seen[s] {
                continue;
            }
            let l = seg.labels[s] as usize;
            if started[l] {
                return false;
            }
            started[l] = true;
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(p) = stack.pop() {
                let (y, x) = (p / w, p % w);
                let nbrs = [
                    (x > 0).then(|| p - 1),
                    (x + 1 < w).then(|| p + 1),
                    (y > 0).then(|| p - w),
                    (y + 1 < h).then(|| p + w),
                ];
                for q in nbrs.into_iter().flatten() {
                    if !seen[q] && seg.labels[q] as usize == l {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        started.iter().all(|&s| s)
    }

    pub(crate) fn random_texture(seed: u64, h: usize, w: usize) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(3, h, w, (0..3 * h * w).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn constant_image_gives_grid_quadrants() {
        // Odd side so the Voronoi bisector falls between pixels.
        let img = ImageTensor::filled(3, 66, 66, 0.4);
        let seg = slic_segment(&img, &SlicParams::with_segments(4)).unwrap();
        assert_eq!(seg.num_segments, 4);
        // Oracle: spatial Voronoi of the 2x2 grid = the four 33x33 quadrants.
        for y in 0..66 {
            for x in 0..66 {
                let q = (y / 33) * 2 + x / 33;
                assert_eq!(seg.label(y, x) as usize, q);
            }
        }
        for count in seg.histogram() {
            assert!((count as f64 - 1089.0).abs() <= 0.15 * 1089.0);
        }
    }

    #[test]
    fn partition_and_determinism() {
        let img = random_texture(5, 40, 48);
        let p = SlicParams::with_segments(30);
        let a = slic_segment(&img, &p).unwrap();
        let b = slic_segment(&img, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labels.len(), 40 * 48);
        assert!(a.histogram().iter().all(|&c| c > 0));
        assert!(labels_connected(&a));
    }

    #[test]
    fn grayscale_is_replicated() {
        let g = ImageTensor::filled(1, 16, 16, 0.3);
        let seg = slic_segment(&g, &SlicParams::with_segments(4)).unwrap();
        assert_eq!(seg.num_segments, 4);
    }

    #[test]
    fn rejects_bad_params() {
        let img = ImageTensor::filled(3, 4, 4, 0.0);
        assert!(slic_segment(&img, &SlicParams::with_segments(17)).is_err());
        assert!(slic_segment(&img, &SlicParams::with_segments(0)).is_err());
        let p = SlicParams {
            compactness: 0.0,
            ..SlicParams::with_segments(2)
        };
        assert!(slic_segment(&img, &p).is_err());
    }

    #[test]
    fn compactness_shortens_boundaries() {
        let img = crate::imgproc::gaussian_blur(&random_texture(11, 48, 48), 2.0).unwrap();
        let loose = SlicParams {
            compactness: 0.5,
            ..SlicParams::with_segments(36)
        };
        let tight = SlicParams {
            compactness: 100.0,
            ..SlicParams::with_segments(36)
        };
        let b_loose = slic_segment(&img, &loose).unwrap().boundary_pixels();
        let b_tight = slic_segment(&img, &tight).unwrap().boundary_pixels();
        assert!(b_tight <= b_loose, "{b_tight} > {b_loose}");
    }

    #[test]
    fn connected_input_is_fixed_point() {
        // Four vertical bands, already connected.
        let labels: Vec<u32> = (0..64).map(|i| ((i % 8) / 2) as u32).collect();
        let seg = SuperpixelSegmentation::from_labels(8, 8, labels.clone()).unwrap();
        let out = enforce_connectivity(&seg, 2);
        assert_eq!(out.labels, labels);
    }

    #[test]
    fn island_is_absorbed() {
        let mut labels = vec![1u32; 25];
        labels[12] = 0;
        // label 0 also owns a large region elsewhere: a second image row band
        let mut wide = vec![0u32; 25];
        wide.extend(labels);
        let seg = SuperpixelSegmentation::from_labels(10, 5, wide).unwrap();
        let out = enforce_connectivity(&seg, 2);
        assert_eq!(out.num_segments, 2);
        let island = 25 + 12;
        assert_eq!(out.labels[island], out.labels[island - 1]);
        assert!(labels_connected(&out));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn enforced_segmentations_pass_flood_fill(seed in any::<u64>(), k in 2u32..6, min_size in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<u32> = (0..12 * 10).map(|_| rng.random_range(0..k)).collect();
            let seg = SuperpixelSegmentation::from_labels(12, 10, labels).unwrap();
            let out = enforce_connectivity(&seg, min_size);
            prop_assert!(labels_connected(&out));
            prop_assert!(out.histogram().iter().all(|&c| c > 0));
            if out.num_segments > 1 {
                prop_assert!(out.histogram().iter().all(|&c| c >= min_size));
            }
        }
    }
}
