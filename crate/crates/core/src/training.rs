//! Loss terms, the FNE target, Adam and the training loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint;
use crate::error::{invalid, Error, Result};
use crate::imgproc::{
    gms_mean, minmax_normalize_slice, prewitt_kernels, resize_bilinear, ssim_mean, ImageTensor, MaskMap, SsimParams,
    GMS_C, GMS_EPS,
};
use crate::network::{FeatureBlock, NetworkConfig, ParamKind, TsdnModel, WeightVector};
use crate::par::{self, Exec};
use crate::slic::{slic_segment, SlicParams, SuperpixelSegmentation};
use crate::surf::{surf_transform, SurfConfig, SurfSample};
use crate::tensor::{Real, Tensor};

/// Independent RNG streams derived from one master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Surf = 3,
    Data = 4,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_r: f64,
    pub lambda_s: f64,
    pub lambda_g: f64,
    pub lambda_m: f64,
    pub lambda_f: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_r: 1.0,
            lambda_s: 0.5,
            lambda_g: 1.0,
            lambda_m: 1.0,
            lambda_f: 5e-5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_r, self.lambda_s, self.lambda_g, self.lambda_m, self.lambda_f];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return invalid("loss weights must be finite and non-negative");
        }
        Ok(())
    }
}

/// Raw loss terms before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub l_r: f64,
    pub l_s: f64,
    pub l_g: f64,
    pub l_m: f64,
    pub l_fne: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_r: f64,
    pub l_s: f64,
    pub l_g: f64,
    pub l_m: f64,
    pub l_fne: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// First non-finite term, if any.
    fn non_finite(&self) -> Option<(&'static str, f64)> {
        [
            ("l_r", self.l_r),
            ("l_s", self.l_s),
            ("l_g", self.l_g),
            ("l_m", self.l_m),
            ("l_fne", self.l_fne),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
    }
}

pub fn total_loss(t: LossTerms, w: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        l_r: t.l_r,
        l_s: t.l_s,
        l_g: t.l_g,
        l_m: t.l_m,
        l_fne: t.l_fne,
        total: w.lambda_r * t.l_r + w.lambda_s * t.l_s + w.lambda_g * t.l_g + w.lambda_m * t.l_m + w.lambda_f * t.l_fne,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub surf: SurfConfig,
    pub weights: LossWeights,
    /// Only `true` is supported: the target is a non-differentiable
    /// function of the prediction.
    pub detach_fne_target: bool,
    /// With SURF off, the network sees clean inputs and an empty mask.
    pub enable_surf: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 7e-5,
            epochs: 200,
            batch_size: 8,
            seed: 0,
            surf: SurfConfig::default(),
            weights: LossWeights::default(),
            detach_fne_target: true,
            enable_surf: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return invalid(format!("learning rate {} must be finite and >= 0", self.learning_rate));
        }
        if self.batch_size == 0 {
            return invalid("batch size must be at least 1");
        }
        if !self.detach_fne_target {
            return invalid("a differentiable FNE target is not supported; set detach_fne_target");
        }
        self.surf.validate()?;
        self.weights.validate()
    }
}

fn same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return invalid(format!("shape mismatch: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

pub fn loss_reconstruction(i: &ImageTensor, r: &ImageTensor) -> Result<f64> {
    same_shape(i, r)?;
    Ok(mse(i.data(), r.data()))
}

/// `1 - mean over channels of SSIM`.
pub fn loss_ssim(i: &ImageTensor, r: &ImageTensor) -> Result<f64> {
    same_shape(i, r)?;
    let p = SsimParams::default();
    let mut total = 0.0;
    for c in 0..i.channels() {
        total += ssim_mean(&i.channel_map(c), &r.channel_map(c), &p)?;
    }
    Ok(1.0 - total / i.channels() as f64)
}

/// `1 - mean over channels of GMS`.
pub fn loss_gms(i: &ImageTensor, r: &ImageTensor) -> Result<f64> {
    same_shape(i, r)?;
    let mut total = 0.0;
    for c in 0..i.channels() {
        total += gms_mean(&i.channel_map(c), &r.channel_map(c))?;
    }
    Ok(1.0 - total / i.channels() as f64)
}

pub fn loss_mask(m_gt: &MaskMap, m_pred: &MaskMap) -> Result<f64> {
    if (m_gt.height(), m_gt.width()) != (m_pred.height(), m_pred.width()) {
        return invalid("mask shape mismatch");
    }
    Ok(mse(m_gt.data(), m_pred.data()))
}

const BCE_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy with soft targets.
pub fn loss_fne(w_gt: &WeightVector, w_pred: &WeightVector) -> Result<f64> {
    if w_gt.len() != w_pred.len() || w_gt.is_empty() {
        return invalid(format!("weight lengths {} and {} differ", w_gt.len(), w_pred.len()));
    }
    let total: f64 = w_gt
        .values()
        .iter()
        .zip(w_pred.values())
        .map(|(&t, &p)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / w_gt.len() as f64)
}

/// Per-channel similarity of the upscaled latent to the predicted mask,
/// inverted: channels that look like the anomaly mask get weight near 0.
/// A constant similarity vector yields all zeros.
pub fn compute_w_gt(f: &FeatureBlock, m_pred: &MaskMap) -> Result<WeightVector> {
    let (h, w) = (m_pred.height(), m_pred.width());
    let latent = ImageTensor::new(f.channels, f.height, f.width, f.data.clone())?;
    let up = resize_bilinear(&latent, h, w)?;
    let p = SsimParams::default();
    let d = (0..f.channels)
        .map(|c| {
            let ch = MaskMap::new(h, w, minmax_normalize_slice(up.plane(c)))?;
            ssim_mean(&ch, m_pred, &p)
        })
        .collect::<Result<Vec<f64>>>()?;
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Ok(WeightVector::zeros(f.channels));
    }
    WeightVector::new(minmax_normalize_slice(&d).into_iter().map(|v| 1.0 - v).collect())
}

fn tape_mse<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let sq = g.mul(d, d);
    g.mean(sq)
}

/// `1 - mean SSIM` over every plane of two NCHW tensors.
fn tape_ssim_loss<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let p = SsimParams::default();
    let win = p.window();
    let aa = g.mul(a, a);
    let bb = g.mul(b, b);
    let ab = g.mul(a, b);
    let mu_a = g.filter(a, &win, &win);
    let mu_b = g.filter(b, &win, &win);
    let e_aa = g.filter(aa, &win, &win);
    let e_bb = g.filter(bb, &win, &win);
    let e_ab = g.filter(ab, &win, &win);
    let ma2 = g.mul(mu_a, mu_a);
    let mb2 = g.mul(mu_b, mu_b);
    let mab = g.mul(mu_a, mu_b);
    let var_a = g.sub(e_aa, ma2);
    let var_b = g.sub(e_bb, mb2);
    let cov = g.sub(e_ab, mab);
    let n1 = g.affine(mab, 2.0, p.c1);
    let n2 = g.affine(cov, 2.0, p.c2);
    let m_sum = g.add(ma2, mb2);
    let d1 = g.affine(m_sum, 1.0, p.c1);
    let v_sum = g.add(var_a, var_b);
    let d2 = g.affine(v_sum, 1.0, p.c2);
    let num = g.mul(n1, n2);
    let den = g.mul(d1, d2);
    let map = g.div(num, den);
    let m = g.mean(map);
    g.affine(m, -1.0, 1.0)
}

fn tape_grad_mag_sq<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    let (smooth, diff) = prewitt_kernels();
    let gx = g.filter(x, &smooth, &diff);
    let gy = g.filter(x, &diff, &smooth);
    let gx2 = g.mul(gx, gx);
    let gy2 = g.mul(gy, gy);
    let s = g.add(gx2, gy2);
    g.affine(s, 1.0, GMS_EPS)
}

/// `1 - mean GMS` over every plane of two NCHW tensors.
fn tape_gms_loss<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let sa = tape_grad_mag_sq(g, a);
    let sb = tape_grad_mag_sq(g, b);
    let ma = g.sqrt(sa);
    let mb = g.sqrt(sb);
    let prod = g.mul(ma, mb);
    let num = g.affine(prod, 2.0, GMS_C);
    let sum = g.add(sa, sb);
    let den = g.affine(sum, 1.0, GMS_C);
    let map = g.div(num, den);
    let m = g.mean(map);
    g.affine(m, -1.0, 1.0)
}

fn stack_images<T: Real>(imgs: impl Iterator<Item = Vec<f64>>, shape: Vec<usize>) -> Tensor<T> {
    let data: Vec<T> = imgs.flat_map(|v| v.into_iter().map(T::lit)).collect();
    Tensor::new(shape, data)
}

/// Network inputs and loss targets for one batch.
pub struct Batch<T> {
    distorted: Tensor<T>,
    clean: Tensor<T>,
    mask: Tensor<T>,
}

impl<T: Real> Batch<T> {
    pub fn new(samples: &[SurfSample], cfg: &NetworkConfig) -> Result<Self> {
        if samples.is_empty() {
            return invalid("empty batch");
        }
        let [h, w] = cfg.input_size;
        for s in samples {
            if s.original.shape() != (3, h, w) || s.distorted.shape() != (3, h, w) {
                return invalid(format!("training images must be 3x{h}x{w}"));
            }
        }
        let n = samples.len();
        Ok(Self {
            distorted: stack_images(samples.iter().map(|s| s.distorted.data().to_vec()), vec![n, 3, h, w]),
            clean: stack_images(samples.iter().map(|s| s.original.data().to_vec()), vec![n, 3, h, w]),
            mask: stack_images(samples.iter().map(|s| s.mask.data().to_vec()), vec![n, 1, h, w]),
        })
    }

    pub fn len(&self) -> usize {
        self.clean.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Scalar loss nodes of one recorded batch.
pub struct LossGraph {
    pub total: Var,
    pub params: Vec<Var>,
    pub breakdown: LossBreakdown,
    /// Concatenated per-image FNE targets, when the FNE is enabled.
    pub w_gt: Option<Vec<f64>>,
}

/// Build the full objective on `g`. `w_gt` overrides the target computed
/// from the current prediction.
pub fn build_loss<T: Real>(
    model: &TsdnModel<T>,
    g: &mut Graph<T>,
    batch: &Batch<T>,
    weights: &LossWeights,
    w_gt: Option<&[f64]>,
) -> Result<LossGraph> {
    let params = model.bind(g);
    let x = g.constant(batch.distorted.clone());
    let clean = g.constant(batch.clean.clone());
    let fv = model.architecture().forward(g, &params, x, true);

    let l_r = tape_mse(g, fv.recon, clean);
    let l_s = tape_ssim_loss(g, fv.recon, clean);
    let l_g = tape_gms_loss(g, fv.recon, clean);
    let mut terms = vec![(l_r, weights.lambda_r), (l_s, weights.lambda_s), (l_g, weights.lambda_g)];
    let mut l_m = None;
    if let Some(mask) = fv.mask {
        let target = g.constant(batch.mask.clone());
        let v = tape_mse(g, mask, target);
        terms.push((v, weights.lambda_m));
        l_m = Some(v);
    }

    let mut l_fne = None;
    let mut target_used = None;
    if let (Some(wv), Some(mask)) = (fv.weights, fv.mask) {
        let target = match w_gt {
            Some(t) => t.to_vec(),
            None => fne_targets(g.value(fv.latent), g.value(mask))?,
        };
        let v = g.bce_mean(wv, &target);
        terms.push((v, weights.lambda_f));
        l_fne = Some(v);
        target_used = Some(target);
    }
    let total = g.weighted_sum(&terms);
    let read = |g: &Graph<T>, v: Option<Var>| v.map_or(0.0, |v| g.scalar(v).as_f64());
    let breakdown = LossBreakdown {
        l_r: read(g, Some(l_r)),
        l_s: read(g, Some(l_s)),
        l_g: read(g, Some(l_g)),
        l_m: read(g, l_m),
        l_fne: read(g, l_fne),
        total: g.scalar(total).as_f64(),
    };
    Ok(LossGraph {
        total,
        params,
        breakdown,
        w_gt: target_used,
    })
}

fn fne_targets<T: Real>(latent: &Tensor<T>, mask: &Tensor<T>) -> Result<Vec<f64>> {
    let (n, c, lh, lw) = latent.dims4();
    let (_, _, h, w) = mask.dims4();
    let lv = latent.to_f64_vec();
    let mv = mask.to_f64_vec();
    // A diverged forward pass yields a NaN target, so the caller sees a
    // non-finite loss term rather than an input error.
    if lv.iter().chain(&mv).any(|v| !v.is_finite()) {
        return Ok(vec![f64::NAN; n * c]);
    }
    let mut out = Vec::with_capacity(n * c);
    for i in 0..n {
        let f = FeatureBlock::new(c, lh, lw, lv[i * c * lh * lw..(i + 1) * c * lh * lw].to_vec())?;
        let m = MaskMap::new(h, w, mv[i * h * w..(i + 1) * h * w].iter().map(|v| v.clamp(0.0, 1.0)).collect())?;
        out.extend_from_slice(compute_w_gt(&f, &m)?.values());
    }
    Ok(out)
}

/// Loss of `model` on `batch` without recording a tape.
pub fn evaluate_loss<T: Real>(
    model: &TsdnModel<T>,
    batch: &Batch<T>,
    weights: &LossWeights,
    w_gt: Option<&[f64]>,
    exec: Exec,
) -> Result<LossBreakdown> {
    let mut g = Graph::inference(exec);
    Ok(build_loss(model, &mut g, batch, weights, w_gt)?.breakdown)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, params: &[Tensor<T>]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>]) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for (k, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[k] else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Owns the model and optimizer state across steps.
pub struct Trainer<T> {
    pub model: TsdnModel<T>,
    adam: Adam<T>,
    weights: LossWeights,
    exec: Exec,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: TsdnModel<T>, cfg: &TrainConfig, exec: Exec) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(cfg.learning_rate, model.params());
        Ok(Self {
            model,
            adam,
            weights: cfg.weights,
            exec,
        })
    }

    /// One Adam step on `samples`. The parameters are left untouched when
    /// any loss term is non-finite.
    pub fn step(&mut self, samples: &[SurfSample], epoch: usize, step: usize) -> Result<LossBreakdown> {
        let batch = Batch::new(samples, self.model.config())?;
        let mut g = Graph::new(self.exec);
        let lg = build_loss(&self.model, &mut g, &batch, &self.weights, None)?;
        if let Some((term, value)) = lg.breakdown.non_finite() {
            return Err(Error::Diverged {
                epoch,
                step,
                term,
                value,
            });
        }
        let mut grads = g.backward(lg.total);
        let grads: Vec<Option<Tensor<T>>> = lg.params.iter().map(|&p| grads.take(p)).collect();
        if grads.iter().flatten().any(|t| !t.all_finite()) {
            return Err(Error::Diverged {
                epoch,
                step,
                term: "gradient",
                value: f64::NAN,
            });
        }
        self.adam.step(self.model.params_mut(), &grads);
        Ok(lg.breakdown)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: TsdnModel<T>,
    pub checkpoint: PathBuf,
    pub history: Vec<StepRecord>,
}

pub const CHECKPOINT_FILE: &str = "model.tsdn";
pub const LOSS_FILE: &str = "loss.csv";

/// Mean total loss per epoch, in order.
pub fn epoch_means(history: &[StepRecord]) -> Vec<f64> {
    let mut out: Vec<(f64, usize)> = Vec::new();
    for r in history {
        if out.len() <= r.epoch {
            out.resize(r.epoch + 1, (0.0, 0));
        }
        out[r.epoch].0 += r.loss.total;
        out[r.epoch].1 += 1;
    }
    out.into_iter().filter(|e| e.1 > 0).map(|(s, n)| s / n as f64).collect()
}

/// Segmentations are fixed per image, so they are computed once; each step
/// draws fresh fills.
pub fn train_loop<T: Real>(
    images: &[ImageTensor],
    net: &NetworkConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    exec: Exec,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if images.is_empty() {
        return invalid("training set is empty");
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let model = TsdnModel::<T>::new(net, stream_rng(cfg.seed, Stream::Init).next_u64())?;
    let ckpt = out_dir.join(CHECKPOINT_FILE);
    checkpoint::save(&model, &ckpt)?;

    let loss_path = out_dir.join(LOSS_FILE);
    let file = File::create(&loss_path).map_err(|e| Error::io(&loss_path, e))?;
    let mut log = BufWriter::new(file);
    let io_err = |e| Error::io(&loss_path, e);
    writeln!(log, "epoch,step,l_r,l_s,l_g,l_m,l_fne,total").map_err(io_err)?;

    let segs: Vec<SuperpixelSegmentation> = if cfg.enable_surf {
        let slic = SlicParams::with_segments(cfg.surf.n_segments);
        par::map_slice(exec, images, |img| slic_segment(img, &slic))
            .into_iter()
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut trainer = Trainer::new(model, cfg, exec)?;
    let mut shuffle = stream_rng(cfg.seed, Stream::Shuffle);
    let mut surf_rng = stream_rng(cfg.seed, Stream::Surf);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let seeds: Vec<u64> = idx.iter().map(|_| surf_rng.random()).collect();
            let samples: Vec<SurfSample> = par::map_range(exec, idx.len(), |j| {
                let img = &images[idx[j]];
                if cfg.enable_surf {
                    surf_transform(img, &segs[idx[j]], &cfg.surf.with_seed(seeds[j]))
                } else {
                    Ok(SurfSample::identity(img))
                }
            })
            .into_iter()
            .collect::<Result<_>>()?;
            let loss = match trainer.step(&samples, epoch, step) {
                Ok(l) => l,
                Err(e) => {
                    log.flush().map_err(io_err)?;
                    return Err(e);
                }
            };
            writeln!(
                log,
                "{epoch},{step},{},{},{},{},{},{}",
                loss.l_r, loss.l_s, loss.l_g, loss.l_m, loss.l_fne, loss.total
            )
            .map_err(io_err)?;
            history.push(StepRecord { epoch, step, loss });
        }
        log.flush().map_err(io_err)?;
        checkpoint::save(&trainer.model, &ckpt)?;
        log::info!(
            "epoch {epoch}: mean loss {:.5}",
            epoch_means(&history).last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(TrainOutcome {
        model: trainer.model,
        checkpoint: ckpt,
        history,
    })
}

/// One sampled parameter in a finite-difference check.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub kind: ParamKind,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Central differences of the total loss for `per_kind` random scalars of
/// every parameter kind. The FNE target is frozen at its value for the
/// unperturbed parameters.
pub fn gradient_check(
    model: &TsdnModel<f64>,
    samples: &[SurfSample],
    weights: &LossWeights,
    per_kind: usize,
    h: f64,
    seed: u64,
) -> Result<Vec<GradCheckEntry>> {
    let batch = Batch::<f64>::new(samples, model.config())?;
    let mut g = Graph::new(Exec::Sequential);
    let lg = build_loss(model, &mut g, &batch, weights, None)?;
    let grads = g.backward(lg.total);
    let w_gt = lg.w_gt.clone();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = model.specs();
    let mut kinds: Vec<ParamKind> = specs.iter().map(|s| s.kind).collect();
    kinds.sort();
    kinds.dedup();
    let mut picks = Vec::new();
    for kind in kinds {
        let tensors: Vec<usize> = (0..specs.len()).filter(|&i| specs[i].kind == kind).collect();
        for _ in 0..per_kind {
            let t = tensors[rng.random_range(0..tensors.len())];
            let e = rng.random_range(0..model.params()[t].len());
            picks.push((t, e));
        }
    }

    let mut probe = model.clone();
    let mut out = Vec::with_capacity(picks.len());
    for (t, e) in picks {
        let analytic = grads.get(lg.params[t]).map_or(0.0, |gt| gt.data()[e]);
        let base = probe.params()[t].data()[e];
        probe.params_mut()[t].data_mut()[e] = base + h;
        let plus = evaluate_loss(&probe, &batch, weights, w_gt.as_deref(), Exec::Sequential)?.total;
        probe.params_mut()[t].data_mut()[e] = base - h;
        let minus = evaluate_loss(&probe, &batch, weights, w_gt.as_deref(), Exec::Sequential)?.total;
        probe.params_mut()[t].data_mut()[e] = base;
        let numeric = (plus - minus) / (2.0 * h);
        out.push(GradCheckEntry {
            name: specs[t].name.clone(),
            kind: specs[t].kind,
            index: e,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, 1e-6)`; the floor keeps near-zero gradients
/// from dominating through rounding noise.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgproc::gaussian_window;
    use rand::Rng;
    use crate::slic::tests::random_texture;
    use crate::surf::surf_sample;
    use proptest::prelude::*;

    fn rand_vec(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random()).collect()
    }

    #[test]
    fn total_loss_cases() {
        let ones = LossTerms {
            l_r: 1.0,
            l_s: 1.0,
            l_g: 1.0,
            l_m: 1.0,
            l_fne: 1.0,
        };
        assert!((total_loss(ones, &LossWeights::default()).total - 3.50005).abs() < 1e-12);
        let zero = LossWeights {
            lambda_r: 0.0,
            lambda_s: 0.0,
            lambda_g: 0.0,
            lambda_m: 0.0,
            lambda_f: 0.0,
        };
        assert_eq!(total_loss(ones, &zero).total, 0.0);
        let w = LossWeights::default();
        let base = total_loss(ones, &w).total;
        let doubled = total_loss(LossTerms { l_g: 2.0, ..ones }, &w).total;
        assert_eq!(doubled - base, w.lambda_g);
    }

    proptest! {
        #[test]
        fn total_loss_is_linear(t in proptest::array::uniform5(0.0f64..10.0), l in proptest::array::uniform5(0.0f64..2.0), k in 0usize..5, s in 0.0f64..4.0) {
            let terms = LossTerms { l_r: t[0], l_s: t[1], l_g: t[2], l_m: t[3], l_fne: t[4] };
            let w = LossWeights { lambda_r: l[0], lambda_s: l[1], lambda_g: l[2], lambda_m: l[3], lambda_f: l[4] };
            let mut scaled = t;
            scaled[k] *= s;
            let st = LossTerms { l_r: scaled[0], l_s: scaled[1], l_g: scaled[2], l_m: scaled[3], l_fne: scaled[4] };
            let delta = total_loss(st, &w).total - total_loss(terms, &w).total;
            prop_assert!((delta - l[k] * t[k] * (s - 1.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn image_losses() {
        let a = ImageTensor::new(3, 16, 16, rand_vec(1, 768)).unwrap();
        let b = ImageTensor::new(3, 16, 16, rand_vec(2, 768)).unwrap();
        for f in [loss_reconstruction, loss_ssim, loss_gms] {
            assert!(f(&a, &a).unwrap().abs() < 1e-12);
            assert!((f(&a, &b).unwrap() - f(&b, &a).unwrap()).abs() < 1e-12);
        }
        let zeros = ImageTensor::filled(3, 4, 4, 0.0);
        let ones = ImageTensor::filled(3, 4, 4, 1.0);
        assert_eq!(loss_reconstruction(&zeros, &ones).unwrap(), 1.0);
        let direct: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 768.0;
        assert!((loss_reconstruction(&a, &b).unwrap() - direct).abs() < 1e-15);
        let mut by_hand = 0.0;
        for c in 0..3 {
            by_hand += ssim_mean(&a.channel_map(c), &b.channel_map(c), &SsimParams::default()).unwrap();
        }
        assert!((loss_ssim(&a, &b).unwrap() - (1.0 - by_hand / 3.0)).abs() < 1e-12);
        assert!(loss_ssim(&a, &zeros).is_err());
    }

    #[test]
    fn mask_and_fne_losses() {
        let gt = MaskMap::zeros(4, 4);
        assert_eq!(loss_mask(&gt, &gt).unwrap(), 0.0);
        assert!((loss_mask(&gt, &MaskMap::filled(4, 4, 0.5)).unwrap() - 0.25).abs() < 1e-15);
        assert!(loss_mask(&gt, &MaskMap::zeros(4, 5)).is_err());

        let half = WeightVector::new(vec![0.5; 6]).unwrap();
        assert!((loss_fne(&half, &half).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let t = WeightVector::new(vec![1.0]).unwrap();
        let p = WeightVector::new(vec![1.0 - 1e-7]).unwrap();
        assert!(loss_fne(&t, &p).unwrap() < 1.1e-7);
        let tv = rand_vec(3, 10);
        let pv = rand_vec(4, 10);
        let direct: f64 = tv
            .iter()
            .zip(&pv)
            .map(|(t, p)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
            .sum::<f64>()
            / 10.0;
        let got = loss_fne(&WeightVector::new(tv).unwrap(), &WeightVector::new(pv).unwrap()).unwrap();
        assert!((got - direct).abs() < 1e-9);
        assert!(loss_fne(&half, &t).is_err());
    }

    fn soft_mask(seed: u64, h: usize, w: usize) -> MaskMap {
        MaskMap::new(h, w, rand_vec(seed, h * w)).unwrap()
    }

    #[test]
    fn w_gt_extremes_and_degenerate() {
        let m = soft_mask(5, 16, 16);
        // Latent at full resolution so the resize is the identity.
        let mut data = m.data().to_vec();
        data.extend(m.data().iter().map(|v| 1.0 - v));
        data.extend(rand_vec(6, 256));
        let f = FeatureBlock::new(3, 16, 16, data).unwrap();
        let w = compute_w_gt(&f, &m).unwrap();
        assert!(w.values()[0].abs() < 1e-12);
        assert!((w.values()[1] - 1.0).abs() < 1e-12);

        let same: Vec<f64> = (0..4).flat_map(|_| m.data().to_vec()).collect();
        let f = FeatureBlock::new(4, 16, 16, same).unwrap();
        assert!(compute_w_gt(&f, &m).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn w_gt_matches_composed_oracle() {
        let m = soft_mask(7, 32, 32);
        let f = FeatureBlock::new(4, 2, 2, rand_vec(8, 16).iter().map(|v| 4.0 * v - 2.0).collect()).unwrap();
        let up = resize_bilinear(&ImageTensor::new(4, 2, 2, f.data.clone()).unwrap(), 32, 32).unwrap();
        // Hand-rolled SSIM with explicit window sums.
        let win = gaussian_window(11, 1.5);
        let ssim_loop = |a: &[f64], b: &[f64]| {
            let mut total = 0.0;
            for y in 0..22 {
                for x in 0..22 {
                    let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in 0..11 {
                        for dx in 0..11 {
                            let k = win[dy] * win[dx];
                            let (p, q) = (a[(y + dy) * 32 + x + dx], b[(y + dy) * 32 + x + dx]);
                            ma += k * p;
                            mb += k * q;
                            aa += k * p * p;
                            bb += k * q * q;
                            ab += k * p * q;
                        }
                    }
                    let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                    total += ((2.0 * ma * mb + 1e-4) * (2.0 * cov + 9e-4))
                        / ((ma * ma + mb * mb + 1e-4) * (va + vb + 9e-4));
                }
            }
            total / (22.0 * 22.0)
        };
        let d: Vec<f64> = (0..4)
            .map(|c| {
                let plane = up.plane(c);
                let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let norm: Vec<f64> = plane.iter().map(|v| (v - lo) / (hi - lo)).collect();
                ssim_loop(&norm, m.data())
            })
            .collect();
        let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w = compute_w_gt(&f, &m).unwrap();
        for (got, di) in w.values().iter().zip(&d) {
            assert!((got - (1.0 - (di - lo) / (hi - lo))).abs() < 1e-9);
        }
    }

    #[test]
    fn w_gt_monotone_in_similarity() {
        // Blending a channel toward the mask raises its SSIM and must not
        // raise its weight.
        let m = soft_mask(9, 16, 16);
        let other = rand_vec(10, 256);
        let noise = rand_vec(11, 256);
        let mut prev = f64::INFINITY;
        for step in 0..=5 {
            let t = step as f64 / 5.0;
            let ch0: Vec<f64> = noise.iter().zip(m.data()).map(|(n, v)| (1.0 - t) * n + t * v).collect();
            let mut data = ch0;
            data.extend(m.data().iter().map(|v| 1.0 - v));
            data.extend(m.data());
            data.extend(&other);
            let w = compute_w_gt(&FeatureBlock::new(4, 16, 16, data).unwrap(), &m).unwrap();
            assert!(w.values()[0] <= prev + 1e-12);
            prev = w.values()[0];
        }
    }

    #[test]
    fn tape_losses_match_scalar_versions() {
        let a = ImageTensor::new(3, 16, 16, rand_vec(12, 768)).unwrap();
        let b = ImageTensor::new(3, 16, 16, rand_vec(13, 768)).unwrap();
        let mut g = Graph::<f64>::inference(Exec::Sequential);
        let va = g.constant(Tensor::from_f64(vec![1, 3, 16, 16], a.data()));
        let vb = g.constant(Tensor::from_f64(vec![1, 3, 16, 16], b.data()));
        let s = tape_ssim_loss(&mut g, va, vb);
        let m = tape_gms_loss(&mut g, va, vb);
        let r = tape_mse(&mut g, va, vb);
        assert!((g.scalar(s) - loss_ssim(&a, &b).unwrap()).abs() < 1e-12);
        assert!((g.scalar(m) - loss_gms(&a, &b).unwrap()).abs() < 1e-12);
        assert!((g.scalar(r) - loss_reconstruction(&a, &b).unwrap()).abs() < 1e-15);
    }

    fn samples(seed: u64, n: usize) -> Vec<SurfSample> {
        let cfg = SurfConfig {
            n_segments: 40,
            fill_count: 5,
            seed,
        };
        (0..n)
            .map(|i| surf_sample(&random_texture(seed * 31 + i as u64, 64, 64), &cfg.with_seed(seed + i as u64)).unwrap())
            .collect()
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let model = TsdnModel::<f32>::new(&NetworkConfig::default(), 1).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(model.clone(), &cfg, Exec::Sequential).unwrap();
        tr.step(&samples(1, 2), 0, 0).unwrap();
        for (a, b) in model.params().iter().zip(tr.model.params()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn one_step_descends_for_most_seeds() {
        let mut wins = 0;
        for seed in 0..20u64 {
            let model = TsdnModel::<f32>::new(&NetworkConfig::default(), seed).unwrap();
            let batch = samples(100 + seed, 2);
            let cfg = TrainConfig::default();
            let mut tr = Trainer::new(model, &cfg, Exec::Sequential).unwrap();
            let before = tr.step(&batch, 0, 0).unwrap().total;
            let b = Batch::new(&batch, tr.model.config()).unwrap();
            let after = evaluate_loss(&tr.model, &b, &cfg.weights, None, Exec::Sequential).unwrap().total;
            wins += usize::from(after < before);
        }
        assert!(wins >= 18, "descended on {wins}/20 seeds");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = TsdnModel::<f64>::new(&NetworkConfig::default(), 3).unwrap();
        let entries = gradient_check(&model, &samples(7, 1), &LossWeights::default(), 3, 1e-3, 11).unwrap();
        for e in &entries {
            assert!(e.rel_error <= 1e-3, "{e:?}");
        }
    }

    #[test]
    fn train_loop_zero_epochs_and_determinism() {
        let imgs: Vec<ImageTensor> = (0..3).map(|i| random_texture(50 + i, 64, 64)).collect();
        let net = NetworkConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            surf: SurfConfig {
                n_segments: 40,
                fill_count: 5,
                seed: 0,
            },
            ..TrainConfig::default()
        };
        let out = train_loop::<f32>(&imgs, &net, &cfg, dir.path(), Exec::Sequential).unwrap();
        assert!(out.history.is_empty());
        assert!(out.checkpoint.exists());
        let csv = fs::read_to_string(dir.path().join(LOSS_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 1);

        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            ..cfg
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = train_loop::<f32>(&imgs, &net, &cfg, d1.path(), Exec::Parallel).unwrap();
        let b = train_loop::<f32>(&imgs, &net, &cfg, d2.path(), Exec::Sequential).unwrap();
        assert_eq!(a.history.len(), 4);
        assert_eq!(a.history, b.history);
        assert_eq!(
            fs::read(d1.path().join(LOSS_FILE)).unwrap(),
            fs::read(d2.path().join(LOSS_FILE)).unwrap()
        );
        assert_eq!(fs::read(&a.checkpoint).unwrap(), fs::read(&b.checkpoint).unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: f64::NAN,
                ..TrainConfig::default()
            },
            TrainConfig {
                detach_fne_target: false,
                ..TrainConfig::default()
            },
        ];
        assert!(bad.iter().all(|c| c.validate().is_err()));
        let json = serde_json::to_string(&TrainConfig::default()).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), TrainConfig::default());
        assert_eq!(serde_json::from_str::<TrainConfig>("{}").unwrap().learning_rate, 7e-5);
    }
}
