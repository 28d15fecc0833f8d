//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as it runs (define-by-run) and
//! [`Graph::backward`] replays the tape in reverse. The op set is exactly
//! what the network and its losses need: convolutions, group norm,
//! activations, channel gating, dense layers, elementwise arithmetic,
//! fixed separable filters and the soft-target cross-entropy.

use crate::par::{self, Exec};
use crate::tensor::{col2im, im2col, matmul, matmul_nt, matmul_tn, Real, Tensor, Window};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const GROUP_NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        win: Window,
        cols: Vec<Vec<T>>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        win: Window,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Silu(Var),
    Relu(Var),
    Sigmoid(Var),
    Concat(Var, Var),
    ChannelScale {
        x: Var,
        w: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine {
        x: Var,
        scale: T,
    },
    Sqrt(Var),
    Mean(Var),
    Filter {
        x: Var,
        ky: Vec<T>,
        kx: Vec<T>,
    },
    BceMean {
        p: Var,
        target: Vec<T>,
    },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording tape. Create one per forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    exec: Exec,
    record: bool,
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    /// A tape that records for backpropagation.
    pub fn new(exec: Exec) -> Self {
        Self {
            nodes: Vec::new(),
            exec,
            record: true,
        }
    }

    /// A forward-only tape: nothing requires gradients and no
    /// intermediates are kept for the backward pass.
    pub fn inference(exec: Exec) -> Self {
        Self {
            nodes: Vec::new(),
            exec,
            record: false,
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, cin, h, wd) = self.value(x).dims4();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be [out, in, k, k]");
        assert_eq!(ws[1], cin, "conv weight expects {} input channels, got {cin}", ws[1]);
        let (cout, k) = (ws[0], ws[2]);
        let win = Window {
            kernel: k,
            stride,
            pad,
        };
        let (oh, ow) = (win.out_len(h), win.out_len(wd));
        let rows = cin * k * k;
        let keep = self.record && (self.rg(w) || self.rg(x));
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let per_sample = par::map_range(self.exec, n, |i| {
            let mut cols = vec![T::zero(); rows * oh * ow];
            im2col(&xv[i * cin * h * wd..(i + 1) * cin * h * wd], cin, h, wd, win, &mut cols);
            let mut out = vec![T::zero(); cout * oh * ow];
            if let Some(bv) = bv {
                for (co, chunk) in out.chunks_mut(oh * ow).enumerate() {
                    chunk.fill(bv[co]);
                }
            }
            matmul(cout, rows, oh * ow, wv, &cols, &mut out, bv.is_some());
            (out, cols)
        });
        let mut data = Vec::with_capacity(n * cout * oh * ow);
        let mut saved = Vec::new();
        for (out, cols) in per_sample {
            data.extend_from_slice(&out);
            if keep {
                saved.push(cols);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::new(vec![n, cout, oh, ow], data),
            Op::Conv2d {
                x,
                w,
                b,
                win,
                cols: saved,
            },
            rg,
        )
    }

    /// Transposed convolution with weight `[in, out, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, cin, h, wd) = self.value(x).dims4();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "deconv weight must be [in, out, k, k]");
        assert_eq!(ws[0], cin, "deconv weight expects {} input channels, got {cin}", ws[0]);
        let (cout, k) = (ws[1], ws[2]);
        let win = Window {
            kernel: k,
            stride,
            pad,
        };
        let oh = (h - 1) * stride + k - 2 * pad;
        let ow = (wd - 1) * stride + k - 2 * pad;
        debug_assert_eq!(win.out_len(oh), h);
        let rows = cout * k * k;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let per_sample = par::map_range(self.exec, n, |i| {
            let mut cols = vec![T::zero(); rows * h * wd];
            matmul_tn(rows, cin, h * wd, wv, &xv[i * cin * h * wd..(i + 1) * cin * h * wd], &mut cols, false);
            let mut out = vec![T::zero(); cout * oh * ow];
            col2im(&cols, cout, oh, ow, win, &mut out);
            if let Some(bv) = bv {
                for (co, chunk) in out.chunks_mut(oh * ow).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bv[co]);
                }
            }
            out
        });
        let data: Vec<T> = per_sample.into_iter().flatten().collect();
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::new(vec![n, cout, oh, ow], data),
            Op::ConvTranspose2d { x, w, b, win },
            rg,
        )
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(groups > 0 && c % groups == 0, "{c} channels not divisible into {groups} groups");
        let cg = c / groups;
        let m = cg * h * w;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let eps = T::lit(GROUP_NORM_EPS);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); n * groups];
        let mut out = vec![T::zero(); xv.len()];
        let mf = T::lit(m as f64);
        for s in 0..n * groups {
            let seg = &xv[s * m..(s + 1) * m];
            let mean = seg.iter().copied().sum::<T>() / mf;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
            let r = T::one() / (var + eps).sqrt();
            rstd[s] = r;
            let g0 = (s % groups) * cg;
            for (j, &v) in seg.iter().enumerate() {
                let ch = g0 + j / (h * w);
                let xh = (v - mean) * r;
                xhat[s * m + j] = xh;
                out[s * m + j] = gv[ch] * xh + bv[ch];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let (xhat, rstd) = if self.record { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        self.push(
            Tensor::new(vec![n, c, h, w], out),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            rg,
        )
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, b) = (T::lit(scale), T::lit(shift));
        self.unary(x, |v| s * v + b, Op::Affine { x, scale: s })
    }

    /// Concatenate two NCHW tensors along channels.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat shape mismatch");
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            data.extend_from_slice(&av[i * ca * h * w..(i + 1) * ca * h * w]);
            data.extend_from_slice(&bv[i * cb * h * w..(i + 1) * cb * h * w]);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![n, ca + cb, h, w], data), Op::Concat(a, b), rg)
    }

    /// Multiply channel `c` of sample `i` by `w[i, c]`.
    pub fn channel_scale(&mut self, x: Var, w: Var) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        assert_eq!(self.shape(w), &[n, c], "channel weights must be [N, C]");
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let hw = h * wd;
        let data = xv
            .iter()
            .enumerate()
            .map(|(i, &v)| v * wv[i / hw])
            .collect();
        let rg = self.rg(x) || self.rg(w);
        self.push(Tensor::new(vec![n, c, h, wd], data), Op::ChannelScale { x, w }, rg)
    }

    /// `x [N, in] * w^T + b` with `w [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 2 && ws.len() == 2 && xs[1] == ws[1], "linear shape mismatch {xs:?} x {ws:?}");
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let bv = self.value(b).data();
        let mut out: Vec<T> = (0..n).flat_map(|_| bv.iter().copied()).collect();
        matmul_nt(n, din, dout, self.value(x).data(), self.value(w).data(), &mut out, true);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::new(vec![n, dout], out), Op::Linear { x, w, b }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let t = self.value(x).clone().reshaped(shape);
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().copied().sum::<T>() / T::lit(t.len() as f64);
        let rg = self.rg(x);
        self.push(Tensor::new(vec![1], vec![m]), Op::Mean(x), rg)
    }

    /// Valid-mode separable correlation of every NCHW plane: rows with `ky`,
    /// columns with `kx`.
    pub fn filter(&mut self, x: Var, ky: &[f64], kx: &[f64]) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(h >= ky.len() && w >= kx.len(), "plane {h}x{w} smaller than filter");
        let ky: Vec<T> = ky.iter().map(|&v| T::lit(v)).collect();
        let kx: Vec<T> = kx.iter().map(|&v| T::lit(v)).collect();
        let (oh, ow) = (h + 1 - ky.len(), w + 1 - kx.len());
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut tmp = vec![T::zero(); h * ow];
        for p in 0..n * c {
            let plane = &xv[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                let row = &plane[y * w..(y + 1) * w];
                for x in 0..ow {
                    let mut acc = T::zero();
                    for (k, &wk) in kx.iter().enumerate() {
                        acc += wk * row[x + k];
                    }
                    tmp[y * ow + x] = acc;
                }
            }
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for (k, &wk) in ky.iter().enumerate() {
                    let src = &tmp[(y + k) * ow..(y + k + 1) * ow];
                    for (d, &s) in dst[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                        *d += wk * s;
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, c, oh, ow], out), Op::Filter { x, ky, kx }, rg)
    }

    /// Mean binary cross-entropy of probabilities `p` against soft targets,
    /// with `p` clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce_mean(&mut self, p: Var, target: &[f64]) -> Var {
        let pv = self.value(p).data();
        assert_eq!(pv.len(), target.len(), "bce length mismatch");
        let target: Vec<T> = target.iter().map(|&v| T::lit(v)).collect();
        let (lo, hi) = (T::lit(1e-7), T::one() - T::lit(1e-7));
        let mut total = T::zero();
        for (&pi, &ti) in pv.iter().zip(&target) {
            let q = pi.max(lo).min(hi);
            total -= ti * q.ln() + (T::one() - ti) * (T::one() - q).ln();
        }
        let m = total / T::lit(pv.len() as f64);
        let rg = self.rg(p);
        self.push(Tensor::new(vec![1], vec![m]), Op::BceMean { p, target }, rg)
    }

    /// `sum_i weight_i * term_i` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut total = T::zero();
        let mut rg = false;
        let mut stored = Vec::with_capacity(terms.len());
        for &(v, w) in terms {
            let w = T::lit(w);
            total += w * self.scalar(v);
            rg |= self.rg(v);
            stored.push((v, w));
        }
        self.push(Tensor::new(vec![1], vec![total]), Op::WeightedSum(stored), rg)
    }

    /// Gradients of the scalar `root` with respect to every leaf that
    /// requires them.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert!(self.record, "backward on an inference graph");
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(vec![1], vec![T::one()]));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Tensor<T>>],
        v: Var,
        f: impl Fn(usize) -> T,
    ) {
        if !self.rg(v) {
            return;
        }
        let shape = self.shape(v).to_vec();
        let n = self.value(v).len();
        let data = (0..n).map(f).collect();
        self.accumulate(grads, v, Tensor::new(shape, data));
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, win, cols } => {
                let (n, cin, h, wd) = self.value(*x).dims4();
                let (_, cout, oh, ow) = node.value.dims4();
                let rows = cin * win.kernel * win.kernel;
                let wv = self.value(*w).data();
                let need_x = self.rg(*x);
                let need_w = self.rg(*w);
                let parts = par::map_range(self.exec, n, |i| {
                    let gy = &gd[i * cout * oh * ow..(i + 1) * cout * oh * ow];
                    let dw = need_w.then(|| {
                        let mut dw = vec![T::zero(); cout * rows];
                        matmul_nt(cout, oh * ow, rows, gy, &cols[i], &mut dw, false);
                        dw
                    });
                    let dx = need_x.then(|| {
                        let mut dcols = vec![T::zero(); rows * oh * ow];
                        matmul_tn(rows, cout, oh * ow, wv, gy, &mut dcols, false);
                        let mut dx = vec![T::zero(); cin * h * wd];
                        col2im(&dcols, cin, h, wd, *win, &mut dx);
                        dx
                    });
                    (dw, dx)
                });
                let mut dw_total = vec![T::zero(); cout * rows];
                let mut dx_total = Vec::with_capacity(if need_x { n * cin * h * wd } else { 0 });
                for (dw, dx) in parts {
                    if let Some(dw) = dw {
                        dw_total.iter_mut().zip(&dw).for_each(|(a, &b)| *a += b);
                    }
                    if let Some(dx) = dx {
                        dx_total.extend(dx);
                    }
                }
                if need_w {
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w).to_vec(), dw_total));
                }
                if need_x {
                    self.accumulate(grads, *x, Tensor::new(vec![n, cin, h, wd], dx_total));
                }
                if let Some(b) = b {
                    self.bias_grad(grads, *b, gd, n, cout, oh * ow);
                }
            }
            Op::ConvTranspose2d { x, w, b, win } => {
                let (n, cin, h, wd) = self.value(*x).dims4();
                let (_, cout, oh, ow) = node.value.dims4();
                let rows = cout * win.kernel * win.kernel;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let need_x = self.rg(*x);
                let need_w = self.rg(*w);
                let parts = par::map_range(self.exec, n, |i| {
                    let gy = &gd[i * cout * oh * ow..(i + 1) * cout * oh * ow];
                    let mut dcols = vec![T::zero(); rows * h * wd];
                    im2col(gy, cout, oh, ow, *win, &mut dcols);
                    let xi = &xv[i * cin * h * wd..(i + 1) * cin * h * wd];
                    let dw = need_w.then(|| {
                        let mut dw = vec![T::zero(); cin * rows];
                        matmul_nt(cin, h * wd, rows, xi, &dcols, &mut dw, false);
                        dw
                    });
                    let dx = need_x.then(|| {
                        let mut dx = vec![T::zero(); cin * h * wd];
                        matmul(cin, rows, h * wd, wv, &dcols, &mut dx, false);
                        dx
                    });
                    (dw, dx)
                });
                let mut dw_total = vec![T::zero(); cin * rows];
                let mut dx_total = Vec::with_capacity(if need_x { n * cin * h * wd } else { 0 });
                for (dw, dx) in parts {
                    if let Some(dw) = dw {
                        dw_total.iter_mut().zip(&dw).for_each(|(a, &b)| *a += b);
                    }
                    if let Some(dx) = dx {
                        dx_total.extend(dx);
                    }
                }
                if need_w {
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w).to_vec(), dw_total));
                }
                if need_x {
                    self.accumulate(grads, *x, Tensor::new(vec![n, cin, h, wd], dx_total));
                }
                if let Some(b) = b {
                    self.bias_grad(grads, *b, gd, n, cout, oh * ow);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let (n, c, h, w) = node.value.dims4();
                let hw = h * w;
                let cg = c / groups;
                let m = cg * hw;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for j in 0..hw {
                            dgamma[ch] += gd[base + j] * xhat[base + j];
                            dbeta[ch] += gd[base + j];
                        }
                    }
                }
                if self.rg(*x) {
                    let mf = T::lit(m as f64);
                    let mut dx = vec![T::zero(); gd.len()];
                    for s in 0..n * groups {
                        let g0 = (s % groups) * cg;
                        let (mut sum_d, mut sum_dx) = (T::zero(), T::zero());
                        for j in 0..m {
                            let dxh = gd[s * m + j] * gv[g0 + j / hw];
                            sum_d += dxh;
                            sum_dx += dxh * xhat[s * m + j];
                        }
                        let r = rstd[s];
                        for j in 0..m {
                            let dxh = gd[s * m + j] * gv[g0 + j / hw];
                            dx[s * m + j] = r / mf * (mf * dxh - sum_d - xhat[s * m + j] * sum_dx);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(vec![n, c, h, w], dx));
                }
                self.accumulate(grads, *gamma, Tensor::new(vec![c], dgamma));
                self.accumulate(grads, *beta, Tensor::new(vec![c], dbeta));
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                self.accumulate_with(grads, *x, |i| {
                    let s = sigmoid(xv[i]);
                    gd[i] * s * (T::one() + xv[i] * (T::one() - s))
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate_with(grads, *x, |i| {
                    if xv[i] > T::zero() {
                        gd[i]
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Sigmoid(x) => {
                self.accumulate_with(grads, *x, |i| gd[i] * out[i] * (T::one() - out[i]));
            }
            Op::Sqrt(x) => {
                self.accumulate_with(grads, *x, |i| gd[i] / (out[i] + out[i]));
            }
            Op::Affine { x, scale } => {
                let s = *scale;
                self.accumulate_with(grads, *x, |i| gd[i] * s);
            }
            Op::Concat(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4();
                let cb = self.value(*b).dims4().1;
                let (sa, sb) = (ca * h * w, cb * h * w);
                self.accumulate_with(grads, *a, |i| gd[(i / sa) * (sa + sb) + i % sa]);
                self.accumulate_with(grads, *b, |i| gd[(i / sb) * (sa + sb) + sa + i % sb]);
                let _ = n;
            }
            Op::ChannelScale { x, w } => {
                let (n, c, h, wd) = self.value(*x).dims4();
                let hw = h * wd;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                self.accumulate_with(grads, *x, |i| gd[i] * wv[i / hw]);
                if self.rg(*w) {
                    let dw = (0..n * c)
                        .map(|k| (0..hw).map(|j| gd[k * hw + j] * xv[k * hw + j]).sum())
                        .collect();
                    self.accumulate(grads, *w, Tensor::new(vec![n, c], dw));
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, din) = (xs[0], xs[1]);
                let dout = self.shape(*w)[0];
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); dout * din];
                    matmul_tn(dout, n, din, gd, self.value(*x).data(), &mut dw, false);
                    self.accumulate(grads, *w, Tensor::new(vec![dout, din], dw));
                }
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); n * din];
                    matmul(n, dout, din, gd, self.value(*w).data(), &mut dx, false);
                    self.accumulate(grads, *x, Tensor::new(vec![n, din], dx));
                }
                self.accumulate_with(grads, *b, |j| (0..n).map(|i| gd[i * dout + j]).sum());
            }
            Op::Reshape(x) => {
                let t = g.clone().reshaped(self.shape(*x).to_vec());
                self.accumulate(grads, *x, t);
            }
            Op::Add(a, b) => {
                self.accumulate_with(grads, *a, |i| gd[i]);
                self.accumulate_with(grads, *b, |i| gd[i]);
            }
            Op::Sub(a, b) => {
                self.accumulate_with(grads, *a, |i| gd[i]);
                self.accumulate_with(grads, *b, |i| -gd[i]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate_with(grads, *a, |i| gd[i] * bv[i]);
                self.accumulate_with(grads, *b, |i| gd[i] * av[i]);
            }
            Op::Div(a, b) => {
                let bv = self.value(*b).data();
                self.accumulate_with(grads, *a, |i| gd[i] / bv[i]);
                self.accumulate_with(grads, *b, |i| -gd[i] * out[i] / bv[i]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let d = gd[0] / T::lit(n as f64);
                self.accumulate_with(grads, *x, |_| d);
            }
            Op::Filter { x, ky, kx } => {
                if !self.rg(*x) {
                    return;
                }
                let (n, c, h, w) = self.value(*x).dims4();
                let (_, _, oh, ow) = node.value.dims4();
                let mut dx = vec![T::zero(); n * c * h * w];
                let mut dtmp = vec![T::zero(); h * ow];
                for p in 0..n * c {
                    dtmp.fill(T::zero());
                    let gp = &gd[p * oh * ow..(p + 1) * oh * ow];
                    for y in 0..oh {
                        for (k, &wk) in ky.iter().enumerate() {
                            let dst = &mut dtmp[(y + k) * ow..(y + k + 1) * ow];
                            for (d, &s) in dst.iter_mut().zip(&gp[y * ow..(y + 1) * ow]) {
                                *d += wk * s;
                            }
                        }
                    }
                    let dplane = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..h {
                        for x in 0..ow {
                            let v = dtmp[y * ow + x];
                            for (k, &wk) in kx.iter().enumerate() {
                                dplane[y * w + x + k] += wk * v;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![n, c, h, w], dx));
            }
            Op::BceMean { p, target } => {
                let pv = self.value(*p).data();
                let (lo, hi) = (T::lit(1e-7), T::one() - T::lit(1e-7));
                let scale = gd[0] / T::lit(pv.len() as f64);
                self.accumulate_with(grads, *p, |i| {
                    let q = pv[i];
                    if q < lo || q > hi {
                        T::zero()
                    } else {
                        scale * (q - target[i]) / (q * (T::one() - q))
                    }
                });
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, Tensor::new(vec![1], vec![gd[0] * w]));
                }
            }
        }
    }

    fn bias_grad(&self, grads: &mut [Option<Tensor<T>>], b: Var, gd: &[T], n: usize, c: usize, hw: usize) {
        self.accumulate_with(grads, b, |ch| {
            (0..n)
                .map(|i| gd[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().copied().sum::<T>())
                .sum()
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks d(sum(out * probe))/d(input) against central differences for
    /// every element of every input.
    fn check<F>(inputs: Vec<Tensor<f64>>, f: F)
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Var,
    {
        let eval = |inputs: &[Tensor<f64>], grad: bool| {
            let mut g = Graph::new(Exec::Sequential);
            let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
            let out = f(&mut g, &vars);
            let probe: Vec<f64> = (0..g.value(out).len()).map(|i| ((i % 7) as f64 - 3.0) * 0.3 + 0.1).collect();
            let pv = g.constant(Tensor::new(g.shape(out).to_vec(), probe));
            let prod = g.mul(out, pv);
            let loss = g.mean(prod);
            let value = g.scalar(loss);
            let grads = grad.then(|| {
                let gr = g.backward(loss);
                vars.iter().map(|v| gr.get(*v).cloned()).collect::<Vec<_>>()
            });
            (value, grads)
        };
        let (_, grads) = eval(&inputs, true);
        let grads = grads.unwrap();
        let h = 1e-5;
        for (k, t) in inputs.iter().enumerate() {
            let gk = grads[k].as_ref().expect("input received no gradient");
            for i in 0..t.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let fd = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * h);
                let an = gk.data()[i];
                assert!(
                    (fd - an).abs() <= 1e-6 + 1e-5 * fd.abs().max(an.abs()),
                    "input {k} elem {i}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, vec![2, 2, 5, 5]);
        let w = rand_tensor(&mut rng, vec![3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, vec![3]);
        check(vec![x.clone(), w.clone(), b.clone()], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1));
        check(vec![x, w, b], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1));
    }

    #[test]
    fn conv_transpose_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, vec![2, 3, 3, 3]);
        let w = rand_tensor(&mut rng, vec![3, 2, 4, 4]);
        let b = rand_tensor(&mut rng, vec![2]);
        check(vec![x, w, b], |g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1));
    }

    #[test]
    fn conv_transpose_matches_scatter_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, vec![1, 2, 3, 3]);
        let w = rand_tensor(&mut rng, vec![2, 3, 4, 4]);
        let mut g = Graph::<f64>::inference(Exec::Sequential);
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv_transpose2d(xv, wv, None, 2, 1);
        assert_eq!(g.shape(y), &[1, 3, 6, 6]);
        let mut want = vec![0.0; 3 * 36];
        for ci in 0..2 {
            for iy in 0..3 {
                for ix in 0..3 {
                    for co in 0..3 {
                        for ky in 0..4 {
                            for kx in 0..4 {
                                let oy = (iy * 2 + ky) as isize - 1;
                                let ox = (ix * 2 + kx) as isize - 1;
                                if (0..6).contains(&oy) && (0..6).contains(&ox) {
                                    want[co * 36 + oy as usize * 6 + ox as usize] += x.data()[ci * 9 + iy * 3 + ix]
                                        * w.data()[((ci * 3 + co) * 4 + ky) * 4 + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        for (a, b) in g.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn group_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, vec![2, 4, 3, 3]);
        let gamma = rand_tensor(&mut rng, vec![4]);
        let beta = rand_tensor(&mut rng, vec![4]);
        check(vec![x, gamma, beta], |g, v| g.group_norm(v[0], v[1], v[2], 2));
    }

    #[test]
    fn elementwise_and_misc_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_tensor(&mut rng, vec![2, 2, 4, 4]);
        let b = Tensor::new(vec![2, 2, 4, 4], a.data().iter().map(|v| v.abs() + 0.5).collect());
        check(vec![a.clone(), b.clone()], |g, v| {
            let s = g.silu(v[0]);
            let q = g.div(s, v[1]);
            let r = g.sqrt(v[1]);
            let m = g.mul(q, r);
            let t = g.sub(m, v[0]);
            let u = g.affine(t, 1.7, 0.2);
            let c = g.concat(u, v[1]);
            g.sigmoid(c)
        });
        let w = rand_tensor(&mut rng, vec![2, 2]);
        check(vec![a.clone(), w], |g, v| g.channel_scale(v[0], v[1]));
        check(vec![a.clone()], |g, v| g.filter(v[0], &[0.2, 0.5, 0.3], &[-1.0, 0.0, 1.0]));
        let x = rand_tensor(&mut rng, vec![3, 5]);
        let lw = rand_tensor(&mut rng, vec![4, 5]);
        let lb = rand_tensor(&mut rng, vec![4]);
        check(vec![x, lw, lb], |g, v| {
            let y = g.linear(v[0], v[1], v[2]);
            let r = g.reshape(y, vec![12]);
            g.relu(r)
        });
    }

    #[test]
    fn bce_gradient_and_values() {
        let mut g = Graph::<f64>::new(Exec::Sequential);
        let p = g.param(Tensor::new(vec![3], vec![0.2, 0.6, 0.9]));
        let t = [0.0, 0.5, 1.0];
        let l = g.bce_mean(p, &t);
        let want = -((0.8f64).ln() + 0.5 * (0.6f64).ln() + 0.5 * (0.4f64).ln() + (0.9f64).ln()) / 3.0;
        assert!((g.scalar(l) - want).abs() < 1e-12);
        let gr = g.backward(l);
        let d = gr.get(p).unwrap().data();
        for (i, (&pi, &ti)) in [0.2, 0.6, 0.9].iter().zip(&t).enumerate() {
            assert!((d[i] - (pi - ti) / (pi * (1.0 - pi)) / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, vec![4, 3, 8, 8]);
        let w = rand_tensor(&mut rng, vec![5, 3, 3, 3]);
        let run = |exec| {
            let mut g = Graph::<f64>::new(exec);
            let (xv, wv) = (g.param(x.clone()), g.param(w.clone()));
            let y = g.conv2d(xv, wv, None, 2, 1);
            let l = g.mean(y);
            let gr = g.backward(l);
            (g.value(y).clone(), gr.get(wv).unwrap().clone())
        };
        assert_eq!(run(Exec::Sequential), run(Exec::Parallel));
    }
}
