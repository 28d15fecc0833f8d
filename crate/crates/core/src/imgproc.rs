//! Image and map primitives: colour conversion, resampling, blurring and the
//! two similarity measures (SSIM, GMS) used by the losses and the FNE target.

use crate::error::{invalid, Result};

/// Dense `channels x height x width` float image, planar layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return invalid(format!("empty image shape {channels}x{height}x{width}"));
        }
        if data.len() != channels * height * width {
            return invalid(format!(
                "data length {} does not match shape {channels}x{height}x{width}",
                data.len()
            ));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return invalid(format!("non-finite pixel value {v}"));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "empty image shape");
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Copy one channel out as a single-channel map.
    pub fn channel_map(&self, c: usize) -> MaskMap {
        MaskMap {
            height: self.height,
            width: self.width,
            data: self.plane(c).to_vec(),
        }
    }

    /// Replicate a single-channel image to three channels; three-channel
    /// images are returned unchanged.
    pub fn to_rgb(&self) -> Result<ImageTensor> {
        match self.channels {
            3 => Ok(self.clone()),
            1 => {
                let mut data = Vec::with_capacity(self.data.len() * 3);
                for _ in 0..3 {
                    data.extend_from_slice(&self.data);
                }
                ImageTensor::new(3, self.height, self.width, data)
            }
            c => invalid(format!("cannot convert {c}-channel image to RGB")),
        }
    }
}

/// Single-channel `height x width` map with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl MaskMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return invalid(format!("empty map shape {height}x{width}"));
        }
        if data.len() != height * width {
            return invalid(format!(
                "data length {} does not match shape {height}x{width}",
                data.len()
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return invalid(format!("map value {v} outside [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!((0.0..=1.0).contains(&value), "map value outside [0, 1]");
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// True when every value is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Binarize with `value > threshold`.
    pub fn binarized(&self, threshold: f64) -> MaskMap {
        MaskMap {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&v| if v > threshold { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Gaussian-window SSIM configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window_size: usize,
    pub window_sigma: f64,
    pub c1: f64,
    pub c2: f64,
    pub dynamic_range: f64,
}

impl SsimParams {
    /// 11x11 window, sigma 1.5, `c1 = (0.01 L)^2`, `c2 = (0.03 L)^2`.
    pub fn standard(dynamic_range: f64) -> Self {
        Self {
            window_size: 11,
            window_sigma: 1.5,
            c1: (0.01 * dynamic_range).powi(2),
            c2: (0.03 * dynamic_range).powi(2),
            dynamic_range,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size < 3 || self.window_size % 2 == 0 {
            return invalid(format!("SSIM window {} must be odd and >= 3", self.window_size));
        }
        if !(self.window_sigma > 0.0) {
            return invalid("SSIM window sigma must be positive");
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return invalid("SSIM constants must be positive");
        }
        Ok(())
    }

    /// Normalized 1-D Gaussian window; the 2-D window is its outer product.
    pub fn window(&self) -> Vec<f64> {
        gaussian_window(self.window_size, self.window_sigma)
    }
}

impl Default for SsimParams {
    fn default() -> Self {
        Self::standard(1.0)
    }
}

/// Stabilizing constant of the gradient-magnitude similarity on `[0, 1]` data.
pub const GMS_C: f64 = 0.0026;

/// Added under the square root of the gradient magnitude so it stays
/// differentiable where both Prewitt responses vanish.
pub const GMS_EPS: f64 = 1e-12;

/// Normalized Gaussian weights of odd length `size`.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut w: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// sRGB (D65) to CIELAB. Channels of the result are L, a, b.
pub fn rgb_to_lab(img: &ImageTensor) -> Result<ImageTensor> {
    if img.channels != 3 {
        return invalid(format!("rgb_to_lab needs 3 channels, got {}", img.channels));
    }
    const XN: f64 = 0.950_47;
    const YN: f64 = 1.0;
    const ZN: f64 = 1.088_83;
    let n = img.height * img.width;
    let mut out = vec![0.0; 3 * n];
    for i in 0..n {
        let r = srgb_to_linear(img.data[i]);
        let g = srgb_to_linear(img.data[n + i]);
        let b = srgb_to_linear(img.data[2 * n + i]);
        let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
        let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
        let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
        let (fx, fy, fz) = (lab_f(x / XN), lab_f(y / YN), lab_f(z / ZN));
        out[i] = 116.0 * fy - 16.0;
        out[n + i] = 500.0 * (fx - fy);
        out[2 * n + i] = 200.0 * (fy - fz);
    }
    // Lab values are outside [0, 1]; bypass the pixel-range check only.
    Ok(ImageTensor {
        channels: 3,
        height: img.height,
        width: img.width,
        data: out,
    })
}

/// Half-pixel-centred bilinear resampling (`align_corners = false`).
pub fn resize_bilinear(img: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    if out_h == 0 || out_w == 0 {
        return invalid(format!("resize target {out_h}x{out_w} has a zero dimension"));
    }
    let (c, h, w) = img.shape();
    if (out_h, out_w) == (h, w) {
        return Ok(img.clone());
    }
    let ys = axis_taps(h, out_h);
    let xs = axis_taps(w, out_w);
    let mut data = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = img.plane(ch);
        for &(y0, y1, ly) in &ys {
            for &(x0, x1, lx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - lx) + plane[y0 * w + x1] * lx;
                let bot = plane[y1 * w + x0] * (1.0 - lx) + plane[y1 * w + x1] * lx;
                data.push(top * (1.0 - ly) + bot * ly);
            }
        }
    }
    Ok(ImageTensor {
        channels: c,
        height: out_h,
        width: out_w,
        data,
    })
}

fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Reflect an out-of-range index back into `[0, n)` without repeating the
/// edge sample (`d c b | a b c d | c b a`).
#[inline]
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Gaussian kernel truncated at radius `ceil(3 sigma)` and renormalized.
pub fn blur_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    gaussian_window(2 * radius + 1, sigma)
}

/// Separable blur of one `h x w` plane with reflect padding.
pub(crate) fn blur_plane(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &wk) in kernel.iter().enumerate() {
                acc += wk * row[reflect_index(x as isize + k as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for (k, &wk) in kernel.iter().enumerate() {
            let sy = reflect_index(y as isize + k as isize - r, h);
            let src = &tmp[sy * w..(sy + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wk * s;
            }
        }
    }
    out
}

/// Types that can be Gaussian-blurred plane by plane.
pub trait Blurrable: Sized {
    fn blurred_with(&self, kernel: &[f64]) -> Self;
}

impl Blurrable for MaskMap {
    fn blurred_with(&self, kernel: &[f64]) -> Self {
        let mut data = blur_plane(&self.data, self.height, self.width, kernel);
        // Convex weights keep values in range up to rounding.
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        MaskMap {
            height: self.height,
            width: self.width,
            data,
        }
    }
}

impl Blurrable for ImageTensor {
    fn blurred_with(&self, kernel: &[f64]) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.channels {
            data.extend(blur_plane(self.plane(c), self.height, self.width, kernel));
        }
        ImageTensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// Gaussian blur; `sigma = 0` returns the input unchanged.
pub fn gaussian_blur<B: Blurrable + Clone>(input: &B, sigma: f64) -> Result<B> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return invalid(format!("blur sigma {sigma} must be finite and >= 0"));
    }
    if sigma == 0.0 {
        return Ok(input.clone());
    }
    Ok(input.blurred_with(&blur_kernel(sigma)))
}

/// Valid-mode separable correlation of an `h x w` plane.
pub(crate) fn correlate_valid(
    plane: &[f64],
    h: usize,
    w: usize,
    ky: &[f64],
    kx: &[f64],
) -> (Vec<f64>, usize, usize) {
    let oh = h + 1 - ky.len();
    let ow = w + 1 - kx.len();
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = kx.iter().zip(&row[x..]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (k, &wk) in ky.iter().enumerate() {
            let src = &tmp[(y + k) * ow..(y + k + 1) * ow];
            for (d, s) in out[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                *d += wk * s;
            }
        }
    }
    (out, oh, ow)
}

fn same_shape(a: &MaskMap, b: &MaskMap) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return invalid(format!(
            "shape mismatch: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        ));
    }
    Ok(())
}

/// Mean SSIM over all valid window positions.
pub fn ssim_mean(a: &MaskMap, b: &MaskMap, p: &SsimParams) -> Result<f64> {
    ssim_mean_planes(&a.data, &b.data, a.height, a.width, b.height, b.width, p)
}

pub(crate) fn ssim_mean_planes(
    a: &[f64],
    b: &[f64],
    ah: usize,
    aw: usize,
    bh: usize,
    bw: usize,
    p: &SsimParams,
) -> Result<f64> {
    p.validate()?;
    if (ah, aw) != (bh, bw) {
        return invalid(format!("shape mismatch: {ah}x{aw} vs {bh}x{bw}"));
    }
    let (h, w) = (ah, aw);
    if h < p.window_size || w < p.window_size {
        return invalid(format!(
            "map {h}x{w} is smaller than the {} SSIM window",
            p.window_size
        ));
    }
    let win = p.window();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let aa: Vec<f64> = a.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = b.iter().map(|x| x * x).collect();
    let (mu_a, ..) = correlate_valid(a, h, w, &win, &win);
    let (mu_b, ..) = correlate_valid(b, h, w, &win, &win);
    let (e_aa, ..) = correlate_valid(&aa, h, w, &win, &win);
    let (e_bb, ..) = correlate_valid(&bb, h, w, &win, &win);
    let (e_ab, ..) = correlate_valid(&ab, h, w, &win, &win);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + p.c1) * (2.0 * cov + p.c2))
            / ((ma * ma + mb * mb + p.c1) * (va + vb + p.c2));
    }
    Ok(total / n as f64)
}

const PREWITT_SMOOTH: [f64; 3] = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
const PREWITT_DIFF: [f64; 3] = [-1.0, 0.0, 1.0];

pub(crate) fn prewitt_kernels() -> ([f64; 3], [f64; 3]) {
    (PREWITT_SMOOTH, PREWITT_DIFF)
}

fn gradient_magnitude(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (gx, ..) = correlate_valid(plane, h, w, &PREWITT_SMOOTH, &PREWITT_DIFF);
    let (gy, ..) = correlate_valid(plane, h, w, &PREWITT_DIFF, &PREWITT_SMOOTH);
    gx.iter()
        .zip(&gy)
        .map(|(x, y)| (x * x + y * y + GMS_EPS).sqrt())
        .collect()
}

/// Mean gradient-magnitude similarity with 3x3 Prewitt gradients over the
/// valid interior.
pub fn gms_mean(a: &MaskMap, b: &MaskMap) -> Result<f64> {
    same_shape(a, b)?;
    gms_mean_planes(&a.data, &b.data, a.height, a.width)
}

pub(crate) fn gms_mean_planes(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < 3 || w < 3 {
        return invalid(format!("GMS needs at least 3x3, got {h}x{w}"));
    }
    let ga = gradient_magnitude(a, h, w);
    let gb = gradient_magnitude(b, h, w);
    let total: f64 = ga
        .iter()
        .zip(&gb)
        .map(|(x, y)| (2.0 * x * y + GMS_C) / (x * x + y * y + GMS_C))
        .sum();
    Ok(total / ga.len() as f64)
}

/// `(x - min) / (max - min)`; a constant input maps to all zeros.
pub fn minmax_normalize_slice(values: &[f64]) -> Vec<f64> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.0; values.len()];
    }
    values
        .iter()
        .map(|&v| ((v - lo) / range).clamp(0.0, 1.0))
        .collect()
}

pub fn minmax_normalize(map: &MaskMap) -> MaskMap {
    MaskMap {
        height: map.height,
        width: map.width,
        data: minmax_normalize_slice(&map.data),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> MaskMap {
        MaskMap::new(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    /// Per-window SSIM straight from the definition.
    fn ssim_brute_force(a: &MaskMap, b: &MaskMap, p: &SsimParams) -> f64 {
        let win = p.window();
        let k = p.window_size;
        let (h, w) = (a.height(), a.width());
        let mut total = 0.0;
        let mut count = 0;
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wt = win[i] * win[j];
                        ma += wt * a.get(y0 + i, x0 + j);
                        mb += wt * b.get(y0 + i, x0 + j);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wt = win[i] * win[j];
                        let da = a.get(y0 + i, x0 + j) - ma;
                        let db = b.get(y0 + i, x0 + j) - mb;
                        va += wt * da * da;
                        vb += wt * db * db;
                        cov += wt * da * db;
                    }
                }
                total += ((2.0 * ma * mb + p.c1) * (2.0 * cov + p.c2))
                    / ((ma * ma + mb * mb + p.c1) * (va + vb + p.c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn lab_black_white_gray() {
        let black = rgb_to_lab(&ImageTensor::filled(3, 1, 1, 0.0)).unwrap();
        assert!(black.data().iter().all(|v| v.abs() < 1e-12));
        let white = rgb_to_lab(&ImageTensor::filled(3, 1, 1, 1.0)).unwrap();
        assert!((white.get(0, 0, 0) - 100.0).abs() < 1e-3);
        assert!(white.get(1, 0, 0).abs() < 0.01 && white.get(2, 0, 0).abs() < 0.01);
        // skimage.color.rgb2lab([[[0.5, 0.5, 0.5]]]) -> L = 53.38896474111432
        let gray = rgb_to_lab(&ImageTensor::filled(3, 1, 1, 0.5)).unwrap();
        assert!((gray.get(0, 0, 0) - 53.388_964_741_114_32).abs() < 1e-3);
        assert!(gray.get(1, 0, 0).abs() < 0.01 && gray.get(2, 0, 0).abs() < 0.01);
        assert!(rgb_to_lab(&ImageTensor::filled(1, 2, 2, 0.5)).is_err());
    }

    #[test]
    fn resize_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = ImageTensor::new(3, 5, 7, (0..105).map(|_| rng.random()).collect()).unwrap();
        assert_eq!(resize_bilinear(&img, 5, 7).unwrap(), img);

        let c = ImageTensor::filled(2, 3, 3, 0.7);
        let r = resize_bilinear(&c, 8, 5).unwrap();
        assert!(r.data().iter().all(|v| (v - 0.7).abs() < 1e-12));

        let two = ImageTensor::new(1, 2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let up = resize_bilinear(&two, 2, 4).unwrap();
        // src_x = (x + 0.5) / 2 - 0.5 clamped -> 0, 0.25, 0.75, 1
        let expected = [0.0, 0.25, 0.75, 1.0];
        for y in 0..2 {
            for x in 0..4 {
                assert!((up.get(0, y, x) - expected[x]).abs() < 1e-12);
            }
        }
        assert!(resize_bilinear(&two, 0, 3).is_err());
    }

    #[test]
    fn blur_cases() {
        let c = MaskMap::filled(6, 9, 0.4);
        let b = gaussian_blur(&c, 2.5).unwrap();
        assert!(b.data().iter().all(|v| (v - 0.4).abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_map(&mut rng, 7, 5);
        assert_eq!(gaussian_blur(&m, 0.0).unwrap(), m);
        assert!(gaussian_blur(&m, -1.0).is_err());

        let mut impulse = vec![0.0; 81];
        impulse[40] = 1.0;
        let imp = MaskMap::new(9, 9, impulse).unwrap();
        let out = gaussian_blur(&imp, 1.0).unwrap();
        // radius 3 kernel: g(k) = exp(-k^2/2) / sum_{|j|<=3} exp(-j^2/2)
        let norm: f64 = (-3..=3).map(|j: i32| (-(j * j) as f64 / 2.0).exp()).sum();
        let peak = 1.0 / (norm * norm);
        assert!((out.get(4, 4) - peak).abs() < 1e-12);
    }

    #[test]
    fn reflect_index_matches_numpy_reflect() {
        let n = 4;
        let got: Vec<usize> = (-5..9).map(|i| reflect_index(i, n)).collect();
        // numpy.pad(arange(4), 5, mode="reflect") viewed from index -5
        assert_eq!(got, vec![1, 2, 3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1, 2]);
    }

    #[test]
    fn ssim_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = SsimParams::standard(1.0);
        let a = random_map(&mut rng, 16, 16);
        let b = random_map(&mut rng, 16, 16);
        let fast = ssim_mean(&a, &b, &p).unwrap();
        assert!((fast - ssim_brute_force(&a, &b, &p)).abs() < 1e-6);
        assert!((ssim_mean(&a, &a, &p).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(fast, ssim_mean(&b, &a, &p).unwrap());
    }

    #[test]
    fn ssim_rejects_bad_input() {
        let p = SsimParams::standard(1.0);
        let a = MaskMap::zeros(16, 16);
        let b = MaskMap::zeros(16, 17);
        assert!(ssim_mean(&a, &b, &p).is_err());
        let small = MaskMap::zeros(8, 8);
        assert!(ssim_mean(&small, &small, &p).is_err());
        let even = SsimParams {
            window_size: 4,
            ..p
        };
        assert!(ssim_mean(&a, &a, &even).is_err());
    }

    #[test]
    fn gms_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_map(&mut rng, 10, 12);
        assert_eq!(gms_mean(&a, &a).unwrap(), 1.0);
        let c1 = MaskMap::filled(8, 8, 0.1);
        let c2 = MaskMap::filled(8, 8, 0.9);
        assert!((gms_mean(&c1, &c2).unwrap() - 1.0).abs() < 1e-9);
        assert!(gms_mean(&c1, &MaskMap::zeros(8, 9)).is_err());

        // Vertical step at column 4: left half 0, right half 1.
        let step: Vec<f64> = (0..64).map(|i| if i % 8 >= 4 { 1.0 } else { 0.0 }).collect();
        let step = MaskMap::new(8, 8, step).unwrap();
        let flat = MaskMap::zeros(8, 8);
        // Interior columns 1..=6; Prewitt gx = (right - left) on columns 3 and 4
        // (each equal to 1), zero elsewhere; gy = 0. Per pixel similarity is
        // c / (g^2 + c) where g = sqrt(gx^2 + eps) and the flat map has
        // g = sqrt(eps).
        let eps = GMS_EPS;
        let g_edge = (1.0f64 + eps).sqrt();
        let g0 = eps.sqrt();
        let edge_sim = (2.0 * g_edge * g0 + GMS_C) / (g_edge * g_edge + g0 * g0 + GMS_C);
        let flat_sim = 1.0;
        // 6 interior rows x 6 interior columns, 2 of the columns on the edge.
        let expected = (6.0 * 2.0 * edge_sim + 6.0 * 4.0 * flat_sim) / 36.0;
        assert!((gms_mean(&step, &flat).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn minmax_cases() {
        let m = MaskMap::filled(2, 2, 0.3);
        assert!(minmax_normalize(&m).data().iter().all(|&v| v == 0.0));
        assert_eq!(minmax_normalize_slice(&[1.0, 2.0, 3.0]), vec![0.0, 0.5, 1.0]);
    }

    proptest! {
        #[test]
        fn minmax_monotone_and_idempotent(v in proptest::collection::vec(-100.0f64..100.0, 1..40)) {
            let n = minmax_normalize_slice(&v);
            prop_assert_eq!(minmax_normalize_slice(&n), n.clone());
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i] < v[j] {
                        prop_assert!(n[i] <= n[j]);
                    }
                }
            }
            prop_assert!(n.iter().all(|x| (0.0..=1.0).contains(x)));
        }

        #[test]
        fn blur_bounded(seed in any::<u64>(), sigma in 0.1f64..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_map(&mut rng, 9, 13);
            let b = gaussian_blur(&m, sigma).unwrap();
            let (lo, hi) = (m.data().iter().cloned().fold(1.0, f64::min), m.max());
            prop_assert!(b.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }

        #[test]
        fn resize_bounded(seed in any::<u64>(), oh in 1usize..20, ow in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = ImageTensor::new(1, 6, 5, (0..30).map(|_| rng.random()).collect()).unwrap();
            let r = resize_bilinear(&img, oh, ow).unwrap();
            let lo = img.data().iter().cloned().fold(1.0, f64::min);
            let hi = img.data().iter().cloned().fold(0.0, f64::max);
            prop_assert!(r.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }

        #[test]
        fn ssim_gms_ranges(seed in any::<u64>(), h in 11usize..24, w in 11usize..24) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_map(&mut rng, h, w);
            let b = random_map(&mut rng, h, w);
            let s = ssim_mean(&a, &b, &SsimParams::default()).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            let g = gms_mean(&a, &b).unwrap();
            prop_assert!(g > 0.0 && g <= 1.0);
        }
    }
}
