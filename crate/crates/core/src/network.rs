//! The two-stream decoder network.
//!
//! A five-stage strided conv encoder produces a feature pyramid; a 1x1
//! convolution reduces the deepest stage to the latent block `F_1/32`.
//! The abnormality decoder (DCD_A) predicts the corruption mask from it,
//! the feature normality estimator (FNE) scores each latent channel, the
//! latent is gated channel-wise by those scores and the normality decoder
//! (DCD_N) reconstructs the clean image from the gated block plus raw
//! encoder skips.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{invalid, Result};
use crate::imgproc::{ImageTensor, MaskMap};
use crate::par::Exec;
use crate::tensor::{Real, Tensor};

/// Number of encoder stages; the deepest has stride 32.
pub const STAGES: usize = 5;

static DCD_A_CALLS: AtomicUsize = AtomicUsize::new(0);

/// How many times the abnormality decoder has run in this process.
pub fn dcd_a_invocations() -> usize {
    DCD_A_CALLS.load(Ordering::Relaxed)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// `[height, width]`, both divisible by 32.
    pub input_size: [usize; 2],
    pub base_channels: usize,
    /// Channels `C` of the latent block.
    pub latent_channels: usize,
    pub use_skips_dcd_a: bool,
    pub use_skips_dcd_n: bool,
    pub enable_dcd_a: bool,
    pub enable_fne: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_size: [64, 64],
            base_channels: 8,
            latent_channels: 16,
            use_skips_dcd_a: true,
            use_skips_dcd_n: true,
            enable_dcd_a: true,
            enable_fne: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return invalid(format!("input size {h}x{w} must be non-zero multiples of 32"));
        }
        if self.base_channels == 0 || self.latent_channels == 0 {
            return invalid("channel counts must be at least 1");
        }
        if self.enable_fne && !self.enable_dcd_a {
            return invalid("the FNE needs the abnormality decoder; disable both");
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.input_size[0]
    }

    pub fn width(&self) -> usize {
        self.input_size[1]
    }

    /// `(C, H/32, W/32)`.
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        (self.latent_channels, self.height() / 32, self.width() / 32)
    }

    /// Plain one-stream autoencoder: no abnormality decoder, no gating.
    pub fn plain_autoencoder(self, skips: bool) -> Self {
        Self {
            use_skips_dcd_a: false,
            use_skips_dcd_n: skips,
            enable_dcd_a: false,
            enable_fne: false,
            ..self
        }
    }
}

/// Role of a parameter tensor; gradient checks sample per kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    DeconvWeight,
    DeconvBias,
    NormScale,
    NormShift,
    LinearWeight,
    LinearBias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    fan_in: usize,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
    groups: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvBlock {
    conv: Conv,
    norm: Norm,
}

#[derive(Clone, Copy, Debug)]
struct Deconv {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct Stage {
    down: ConvBlock,
    refine: ConvBlock,
}

#[derive(Clone, Debug)]
struct UpBlock {
    deconv: Deconv,
    norm: Norm,
    fuse: ConvBlock,
    skip_stage: Option<usize>,
}

#[derive(Clone, Debug)]
struct Decoder {
    blocks: Vec<UpBlock>,
    head: Conv,
}

#[derive(Clone, Debug)]
struct Fne {
    conv: Conv,
    fc: [Dense; 3],
}

fn norm_groups(c: usize) -> usize {
    let mut g = (c / 4).max(1);
    while !c.is_multiple_of(g) {
        g -= 1;
    }
    g
}

#[derive(Default)]
struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, kind: ParamKind, shape: Vec<usize>, fan_in: usize) -> usize {
        self.specs.push(ParamSpec {
            name,
            kind,
            shape,
            fan_in,
        });
        self.specs.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv {
        let fan_in = cin * k * k;
        Conv {
            w: self.add(format!("{name}.weight"), ParamKind::ConvWeight, vec![cout, cin, k, k], fan_in),
            b: self.add(format!("{name}.bias"), ParamKind::ConvBias, vec![cout], fan_in),
            stride,
            pad: k / 2,
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            gamma: self.add(format!("{name}.scale"), ParamKind::NormScale, vec![c], 0),
            beta: self.add(format!("{name}.shift"), ParamKind::NormShift, vec![c], 0),
            groups: norm_groups(c),
        }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> ConvBlock {
        ConvBlock {
            conv: self.conv(&format!("{name}.conv"), cin, cout, 3, stride),
            norm: self.norm(&format!("{name}.norm"), cout),
        }
    }

    fn deconv(&mut self, name: &str, cin: usize, cout: usize) -> Deconv {
        // A 4x4 stride-2 kernel touches each output pixel with 2x2 taps.
        let fan_in = cin * 4;
        Deconv {
            w: self.add(format!("{name}.weight"), ParamKind::DeconvWeight, vec![cin, cout, 4, 4], fan_in),
            b: self.add(format!("{name}.bias"), ParamKind::DeconvBias, vec![cout], fan_in),
        }
    }

    fn dense(&mut self, name: &str, din: usize, dout: usize) -> Dense {
        Dense {
            w: self.add(format!("{name}.weight"), ParamKind::LinearWeight, vec![dout, din], din),
            b: self.add(format!("{name}.bias"), ParamKind::LinearBias, vec![dout], din),
        }
    }

    fn decoder(&mut self, name: &str, cfg: &NetworkConfig, use_skips: bool, out_channels: usize) -> Decoder {
        let b = cfg.base_channels;
        let widths = [8 * b, 4 * b, 2 * b, b, b];
        let mut cin = cfg.latent_channels;
        let mut blocks = Vec::with_capacity(STAGES);
        for (j, &cout) in widths.iter().enumerate() {
            let skip_stage = (use_skips && j < STAGES - 1).then(|| STAGES - 2 - j);
            let skip_c = skip_stage.map_or(0, |s| b << s);
            blocks.push(UpBlock {
                deconv: self.deconv(&format!("{name}.up{j}.deconv"), cin, cout),
                norm: self.norm(&format!("{name}.up{j}.norm"), cout),
                fuse: self.block(&format!("{name}.up{j}.fuse"), cout + skip_c, cout, 1),
                skip_stage,
            });
            cin = cout;
        }
        Decoder {
            blocks,
            head: self.conv(&format!("{name}.head"), cin, out_channels, 1, 1),
        }
    }
}

/// Layer layout derived from a [`NetworkConfig`]; independent of the
/// scalar type.
#[derive(Clone, Debug)]
pub struct Architecture {
    config: NetworkConfig,
    specs: Vec<ParamSpec>,
    encoder: Vec<Stage>,
    reduce: Conv,
    dcd_a: Option<Decoder>,
    fne: Option<Fne>,
    dcd_n: Decoder,
}

impl Architecture {
    pub fn new(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut bld = Builder::default();
        let b = config.base_channels;
        let mut cin = 3;
        let mut encoder = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let c = b << s;
            encoder.push(Stage {
                down: bld.block(&format!("encoder.stage{s}.down"), cin, c, 2),
                refine: bld.block(&format!("encoder.stage{s}.refine"), c, c, 1),
            });
            cin = c;
        }
        let c = config.latent_channels;
        let reduce = bld.conv("reduce", cin, c, 1, 1);
        let dcd_a = config
            .enable_dcd_a
            .then(|| bld.decoder("dcd_a", config, config.use_skips_dcd_a, 1));
        let fne = config.enable_fne.then(|| {
            let (_, lh, lw) = config.latent_shape();
            Fne {
                conv: bld.conv("fne.conv", c, c, 3, 1),
                fc: [
                    bld.dense("fne.fc0", c * lh * lw, 4 * c),
                    bld.dense("fne.fc1", 4 * c, 2 * c),
                    bld.dense("fne.fc2", 2 * c, c),
                ],
            }
        });
        let dcd_n = bld.decoder("dcd_n", config, config.use_skips_dcd_n, 3);
        Ok(Self {
            config: config.clone(),
            specs: bld.specs,
            encoder,
            reduce,
            dcd_a,
            fne,
            dcd_n,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    fn conv<T: Real>(&self, g: &mut Graph<T>, p: &[Var], c: Conv, x: Var) -> Var {
        g.conv2d(x, p[c.w], Some(p[c.b]), c.stride, c.pad)
    }

    fn norm_act<T: Real>(&self, g: &mut Graph<T>, p: &[Var], n: Norm, x: Var) -> Var {
        let y = g.group_norm(x, p[n.gamma], p[n.beta], n.groups);
        g.silu(y)
    }

    fn block<T: Real>(&self, g: &mut Graph<T>, p: &[Var], b: ConvBlock, x: Var) -> Var {
        let y = self.conv(g, p, b.conv, x);
        self.norm_act(g, p, b.norm, y)
    }

    /// The five pyramid stages at strides 2..32.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Vec<Var> {
        let mut stages = Vec::with_capacity(STAGES);
        let mut h = x;
        for st in &self.encoder {
            h = self.block(g, p, st.down, h);
            h = self.block(g, p, st.refine, h);
            stages.push(h);
        }
        stages
    }

    pub fn reduce<T: Real>(&self, g: &mut Graph<T>, p: &[Var], deepest: Var) -> Var {
        self.conv(g, p, self.reduce, deepest)
    }

    fn decode<T: Real>(&self, dec: &Decoder, g: &mut Graph<T>, p: &[Var], latent: Var, pyramid: &[Var]) -> Var {
        let mut h = latent;
        for blk in &dec.blocks {
            let up = g.conv_transpose2d(h, p[blk.deconv.w], Some(p[blk.deconv.b]), 2, 1);
            let up = self.norm_act(g, p, blk.norm, up);
            let fused_in = match blk.skip_stage {
                Some(s) => g.concat(up, pyramid[s]),
                None => up,
            };
            h = self.block(g, p, blk.fuse, fused_in);
        }
        let logits = self.conv(g, p, dec.head, h);
        g.sigmoid(logits)
    }

    /// Predicted corruption mask `[N, 1, H, W]`, or `None` when disabled.
    pub fn decode_mask<T: Real>(&self, g: &mut Graph<T>, p: &[Var], latent: Var, pyramid: &[Var]) -> Option<Var> {
        let dec = self.dcd_a.as_ref()?;
        DCD_A_CALLS.fetch_add(1, Ordering::Relaxed);
        Some(self.decode(dec, g, p, latent, pyramid))
    }

    /// Per-channel normality weights `[N, C]`, or `None` when disabled.
    pub fn estimate_normality<T: Real>(&self, g: &mut Graph<T>, p: &[Var], latent: Var) -> Option<Var> {
        let fne = self.fne.as_ref()?;
        let n = g.shape(latent)[0];
        let conv = self.conv(g, p, fne.conv, latent);
        let width = g.value(conv).len() / n;
        let mut h = g.reshape(conv, vec![n, width]);
        for (i, fc) in fne.fc.iter().enumerate() {
            h = g.linear(h, p[fc.w], p[fc.b]);
            if i < 2 {
                h = g.relu(h);
            }
        }
        Some(g.sigmoid(h))
    }

    pub fn decode_image<T: Real>(&self, g: &mut Graph<T>, p: &[Var], gated: Var, pyramid: &[Var]) -> Var {
        self.decode(&self.dcd_n, g, p, gated, pyramid)
    }

    /// Full forward pass. With `need_mask = false` the abnormality decoder
    /// is skipped; the reconstruction does not depend on it.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var, need_mask: bool) -> ForwardVars {
        let pyramid = self.encode(g, p, x);
        let latent = self.reduce(g, p, pyramid[STAGES - 1]);
        let mask = if need_mask {
            self.decode_mask(g, p, latent, &pyramid)
        } else {
            None
        };
        let weights = self.estimate_normality(g, p, latent);
        let gated = match weights {
            Some(w) => g.channel_scale(latent, w),
            None => latent,
        };
        let recon = self.decode_image(g, p, gated, &pyramid);
        ForwardVars {
            pyramid,
            latent,
            mask,
            weights,
            gated,
            recon,
        }
    }
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub pyramid: Vec<Var>,
    pub latent: Var,
    pub mask: Option<Var>,
    pub weights: Option<Var>,
    pub gated: Var,
    pub recon: Var,
}

/// `C x h x w` latent features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBlock {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureBlock {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return invalid(format!(
                "feature data length {} does not match {channels}x{height}x{width}",
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return invalid("non-finite feature value");
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    fn from_tensor<T: Real>(t: &Tensor<T>, sample: usize) -> Self {
        let (_, c, h, w) = t.dims4();
        let n = c * h * w;
        Self {
            channels: c,
            height: h,
            width: w,
            data: t.data()[sample * n..(sample + 1) * n].iter().map(|v| v.as_f64()).collect(),
        }
    }

    fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_f64(vec![1, self.channels, self.height, self.width], &self.data)
    }
}

/// Encoder stages, shallowest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub stages: Vec<FeatureBlock>,
}

/// Per-channel weights in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return invalid(format!("weight {v} outside [0, 1]"));
        }
        Ok(Self(values))
    }

    pub fn ones(len: usize) -> Self {
        Self(vec![1.0; len])
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Everything one forward pass produces for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutputs {
    /// Soft mask `M'_surf`; `None` without the abnormality decoder.
    pub m_pred: Option<MaskMap>,
    /// Channel weights `W'`; all ones when the FNE is disabled.
    pub w_pred: WeightVector,
    pub f_latent: FeatureBlock,
    pub f_nml: FeatureBlock,
    /// Reconstruction `R_surf`.
    pub r_surf: ImageTensor,
}

/// Scale channel `c` of `f` by `w[c]`.
pub fn apply_normality_weights(f: &FeatureBlock, w: &WeightVector) -> Result<FeatureBlock> {
    if w.len() != f.channels {
        return invalid(format!("{} weights for {} channels", w.len(), f.channels));
    }
    let n = f.height * f.width;
    let data = f
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| v * w.0[i / n])
        .collect();
    Ok(FeatureBlock { data, ..*f })
}

/// Network parameters plus their layout.
#[derive(Clone, Debug)]
pub struct TsdnModel<T> {
    arch: Architecture,
    params: Vec<Tensor<T>>,
}

pub(crate) fn image_batch<T: Real>(imgs: &[&ImageTensor], cfg: &NetworkConfig) -> Result<Tensor<T>> {
    let [h, w] = cfg.input_size;
    let mut data = Vec::with_capacity(imgs.len() * 3 * h * w);
    for img in imgs {
        if img.shape() != (3, h, w) {
            let (c, ih, iw) = img.shape();
            return invalid(format!("model expects 3x{h}x{w} input, got {c}x{ih}x{iw}"));
        }
        data.extend(img.data().iter().map(|&v| T::lit(v)));
    }
    Ok(Tensor::new(vec![imgs.len(), 3, h, w], data))
}

impl<T: Real> TsdnModel<T> {
    /// Fan-in scaled uniform initialization: weights and biases in
    /// `+-1/sqrt(fan_in)`, norm scale 1, norm shift 0.
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Self> {
        let arch = Architecture::new(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch
            .specs
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data = match s.kind {
                    ParamKind::NormScale => vec![T::one(); n],
                    ParamKind::NormShift => vec![T::zero(); n],
                    _ => {
                        let bound = 1.0 / (s.fan_in as f64).sqrt();
                        (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect()
                    }
                };
                Tensor::new(s.shape.clone(), data)
            })
            .collect();
        Ok(Self { arch, params })
    }

    /// Assemble a model from explicit tensors, checked against the layout.
    pub fn from_params(config: &NetworkConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        let arch = Architecture::new(config)?;
        if params.len() != arch.specs.len() {
            return invalid(format!(
                "expected {} parameter tensors, got {}",
                arch.specs.len(),
                params.len()
            ));
        }
        for (s, t) in arch.specs.iter().zip(&params) {
            if s.shape != t.shape() {
                return invalid(format!("{}: expected shape {:?}, got {:?}", s.name, s.shape, t.shape()));
            }
        }
        Ok(Self { arch, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.arch.config
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.arch.specs
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|t| t.len()).sum()
    }

    /// The same parameters in another scalar type.
    pub fn cast<U: Real>(&self) -> TsdnModel<U> {
        TsdnModel {
            arch: self.arch.clone(),
            params: self
                .params
                .iter()
                .map(|t| Tensor::from_f64(t.shape().to_vec(), &t.to_f64_vec()))
                .collect(),
        }
    }

    /// Register every parameter as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|t| g.param(t.clone())).collect()
    }

    fn bind_constants(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|t| g.constant(t.clone())).collect()
    }

    /// Full forward pass over a batch, all intermediates returned.
    pub fn forward_batch(&self, imgs: &[ImageTensor], exec: Exec) -> Result<Vec<ModelOutputs>> {
        self.run(imgs, exec, true)
    }

    pub fn forward(&self, img: &ImageTensor) -> Result<ModelOutputs> {
        Ok(self.forward_batch(std::slice::from_ref(img), Exec::Sequential)?.remove(0))
    }

    /// Inference path: the abnormality decoder is not evaluated.
    pub fn reconstruct_batch(&self, imgs: &[ImageTensor], exec: Exec) -> Result<Vec<ImageTensor>> {
        Ok(self.run(imgs, exec, false)?.into_iter().map(|o| o.r_surf).collect())
    }

    fn run(&self, imgs: &[ImageTensor], exec: Exec, need_mask: bool) -> Result<Vec<ModelOutputs>> {
        if imgs.is_empty() {
            return Ok(Vec::new());
        }
        let refs: Vec<&ImageTensor> = imgs.iter().collect();
        let input = image_batch::<T>(&refs, self.config())?;
        let mut g = Graph::inference(exec);
        let p = self.bind_constants(&mut g);
        let x = g.constant(input);
        let fv = self.arch.forward(&mut g, &p, x, need_mask);
        let [h, w] = self.config().input_size;
        let c = self.config().latent_channels;
        (0..imgs.len())
            .map(|i| {
                let m_pred = fv
                    .mask
                    .map(|m| MaskMap::new(h, w, slice_f64(g.value(m), i)))
                    .transpose()?;
                let w_pred = match fv.weights {
                    Some(wv) => WeightVector::new(slice_f64(g.value(wv), i))?,
                    None => WeightVector::ones(c),
                };
                Ok(ModelOutputs {
                    m_pred,
                    w_pred,
                    f_latent: FeatureBlock::from_tensor(g.value(fv.latent), i),
                    f_nml: FeatureBlock::from_tensor(g.value(fv.gated), i),
                    r_surf: ImageTensor::new(3, h, w, slice_f64(g.value(fv.recon), i))?,
                })
            })
            .collect()
    }

    pub fn encoder_forward(&self, img: &ImageTensor) -> Result<FeaturePyramid> {
        let input = image_batch::<T>(&[img], self.config())?;
        let mut g = Graph::inference(Exec::Sequential);
        let p = self.bind_constants(&mut g);
        let x = g.constant(input);
        let stages = self.arch.encode(&mut g, &p, x);
        Ok(FeaturePyramid {
            stages: stages.iter().map(|&s| FeatureBlock::from_tensor(g.value(s), 0)).collect(),
        })
    }

    pub fn reduce_channels(&self, deepest: &FeatureBlock) -> Result<FeatureBlock> {
        let expected = self.config().base_channels << (STAGES - 1);
        let [h, w] = self.config().input_size;
        if (deepest.channels, deepest.height, deepest.width) != (expected, h / 32, w / 32) {
            return invalid(format!(
                "deepest stage must be {expected}x{}x{}, got {}x{}x{}",
                h / 32,
                w / 32,
                deepest.channels,
                deepest.height,
                deepest.width
            ));
        }
        let mut g = Graph::inference(Exec::Sequential);
        let p = self.bind_constants(&mut g);
        let x = g.constant(deepest.to_tensor());
        let y = self.arch.reduce(&mut g, &p, x);
        Ok(FeatureBlock::from_tensor(g.value(y), 0))
    }

    fn check_latent(&self, f: &FeatureBlock) -> Result<()> {
        let want = self.config().latent_shape();
        if (f.channels, f.height, f.width) != want {
            return invalid(format!(
                "latent must be {}x{}x{}, got {}x{}x{}",
                want.0, want.1, want.2, f.channels, f.height, f.width
            ));
        }
        Ok(())
    }

    fn check_pyramid(&self, pyr: &FeaturePyramid) -> Result<()> {
        let [h, w] = self.config().input_size;
        if pyr.stages.len() != STAGES {
            return invalid(format!("pyramid must have {STAGES} stages"));
        }
        for (s, st) in pyr.stages.iter().enumerate() {
            let want = (self.config().base_channels << s, h >> (s + 1), w >> (s + 1));
            if (st.channels, st.height, st.width) != want {
                return invalid(format!("pyramid stage {s} has wrong shape"));
            }
        }
        Ok(())
    }

    fn pyramid_vars(&self, g: &mut Graph<T>, pyr: &FeaturePyramid) -> Vec<Var> {
        pyr.stages.iter().map(|s| g.constant(s.to_tensor())).collect()
    }

    /// Abnormality decoder on explicit inputs.
    pub fn dcd_a_forward(&self, f: &FeatureBlock, pyr: &FeaturePyramid) -> Result<MaskMap> {
        self.check_latent(f)?;
        self.check_pyramid(pyr)?;
        let mut g = Graph::inference(Exec::Sequential);
        let p = self.bind_constants(&mut g);
        let lat = g.constant(f.to_tensor());
        let pv = self.pyramid_vars(&mut g, pyr);
        let Some(m) = self.arch.decode_mask(&mut g, &p, lat, &pv) else {
            return invalid("abnormality decoder is disabled in this configuration");
        };
        let [h, w] = self.config().input_size;
        MaskMap::new(h, w, slice_f64(g.value(m), 0))
    }

    pub fn fne_forward(&self, f: &FeatureBlock) -> Result<WeightVector> {
        self.check_latent(f)?;
        let mut g = Graph::inference(Exec::Sequential);
        let p = self.bind_constants(&mut g);
        let lat = g.constant(f.to_tensor());
        match self.arch.estimate_normality(&mut g, &p, lat) {
            Some(w) => WeightVector::new(slice_f64(g.value(w), 0)),
            None => invalid("FNE is disabled in this configuration"),
        }
    }

    /// Normality decoder on explicit inputs.
    pub fn dcd_n_forward(&self, f_nml: &FeatureBlock, pyr: &FeaturePyramid) -> Result<ImageTensor> {
        self.check_latent(f_nml)?;
        self.check_pyramid(pyr)?;
        let mut g = Graph::inference(Exec::Sequential);
        let p = self.bind_constants(&mut g);
        let lat = g.constant(f_nml.to_tensor());
        let pv = self.pyramid_vars(&mut g, pyr);
        let r = self.arch.decode_image(&mut g, &p, lat, &pv);
        let [h, w] = self.config().input_size;
        ImageTensor::new(3, h, w, slice_f64(g.value(r), 0))
    }
}

fn slice_f64<T: Real>(t: &Tensor<T>, sample: usize) -> Vec<f64> {
    let n = t.len() / t.shape()[0];
    t.data()[sample * n..(sample + 1) * n].iter().map(|v| v.as_f64()).collect()
}
