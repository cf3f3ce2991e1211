//! A small reverse-mode automatic differentiation tape.
//!
//! Every operation appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse creation order, which is a valid topological
//! order because operands always precede their results. A tape is meant to
//! live for one forward/backward pass and is not `Sync`.

use std::cell::{Ref, RefCell};

use crate::tensor::{col2im, gemm, im2col, Tensor, Window};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization statistics used by [`Tape::batch_norm`].
#[derive(Clone, Debug)]
pub enum NormStats {
    /// Per-batch statistics (training behaviour).
    Batch,
    /// Fixed running statistics (inference behaviour).
    Running { mean: Vec<f64>, var: Vec<f64> },
}

/// Parameters of the soft nearest-level assignment applied by [`Tape::daq`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DaqParams {
    pub bits: u32,
    pub lower: f64,
    pub upper: f64,
    pub tau: f64,
}

impl DaqParams {
    /// Highest quantization level, `2^b - 1`.
    pub fn top_level(&self) -> f64 {
        ((1u64 << self.bits) - 1) as f64
    }

    /// Clamped, range-normalized score in `[0, 2^b - 1]`.
    pub fn normalize(&self, d: f64) -> f64 {
        self.top_level() * (d.max(self.lower).min(self.upper) - self.lower) / (self.upper - self.lower)
    }

    /// Relaxed mask value and its derivative with respect to `d`.
    pub fn soft(&self, d: f64) -> (f64, f64) {
        let top = self.top_level();
        let levels = 1usize << self.bits;
        let x = self.normalize(d);
        // logits_q = -|x - q| / tau, softmax over q
        let mut best = f64::NEG_INFINITY;
        let mut logits = [0.0f64; 16];
        let mut buf = Vec::new();
        let logits: &mut [f64] = if levels <= 16 {
            &mut logits[..levels]
        } else {
            buf.resize(levels, 0.0);
            &mut buf
        };
        for (q, l) in logits.iter_mut().enumerate() {
            *l = -(x - q as f64).abs() / self.tau;
            best = best.max(*l);
        }
        let mut z = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - best).exp();
            z += *l;
        }
        let mut phi = 0.0;
        let mut gbar = 0.0;
        for (q, w) in logits.iter_mut().enumerate() {
            *w /= z;
            let qf = q as f64;
            phi += qf * *w;
            gbar += *w * -sign(x - qf) / self.tau;
        }
        let mut dphi = 0.0;
        for (q, w) in logits.iter().enumerate() {
            let qf = q as f64;
            let g = -sign(x - qf) / self.tau;
            dphi += qf * w * (g - gbar);
        }
        let inside = d > self.lower && d < self.upper;
        let dx = if inside { top / (self.upper - self.lower) } else { 0.0 };
        (phi / top, dphi * dx / top)
    }

    /// Hard nearest-level assignment; equidistant ties go to the lower level.
    pub fn hard(&self, d: f64) -> f64 {
        let top = self.top_level();
        let x = self.normalize(d);
        let lo = x.floor();
        let level = if x - lo > 0.5 { lo + 1.0 } else { lo };
        level.min(top) / top
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, win: Window },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, win: Window },
    MaxPool { x: Var, argmax: Vec<usize> },
    Relu { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch: bool, stats: Option<(Vec<f64>, Vec<f64>)> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Reshape { x: Var },
    ConcatCols { xs: Vec<Var>, widths: Vec<usize> },
    NarrowCols { x: Var, start: usize, width: usize },
    Mul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Sum { x: Var },
    SumSquares { x: Var, c: f64 },
    Gather { x: Var, idx: Vec<usize> },
    Daq { x: Var, slope: Vec<f64> },
    SoftCrossEntropy { logits: Var, probs: Tensor, target: Tensor, live: Vec<bool> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by a backward pass, indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn dims4(s: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(s.len(), 4, "expected a rank-4 tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A constant input; no gradient is tracked through it.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Batch mean and (biased) variance computed by a batch-statistics
    /// normalization node.
    pub fn norm_batch_stats(&self, v: Var) -> Option<(Vec<f64>, Vec<f64>)> {
        match &self.nodes.borrow()[v.0].op {
            Op::BatchNorm { stats, .. } => stats.clone(),
            _ => None,
        }
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: (usize, usize), pad: (usize, usize)) -> Var {
        let out = {
            let xv = self.value(x);
            let wv = self.value(w);
            let (n, c, h, wd) = dims4(xv.shape());
            let (o, wc, kh, kw) = dims4(wv.shape());
            assert_eq!(c, wc, "conv2d: input has {c} channels, weight expects {wc}");
            let win = Window::new((kh, kw), stride, pad);
            let (oh, ow) = win
                .conv_out(h, wd)
                .unwrap_or_else(|| panic!("conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}"));
            let ckk = c * kh * kw;
            let mut out = vec![0.0; n * o * oh * ow];
            for s in 0..n {
                let cols = im2col(&xv.data()[s * c * h * wd..(s + 1) * c * h * wd], c, h, wd, &win, oh, ow);
                gemm(o, ckk, oh * ow, wv.data(), false, &cols, false, &mut out[s * o * oh * ow..(s + 1) * o * oh * ow], false);
            }
            if let Some(b) = b {
                let bv = self.value(b);
                assert_eq!(bv.len(), o);
                for (i, chunk) in out.chunks_mut(oh * ow).enumerate() {
                    let bias = bv.data()[i % o];
                    chunk.iter_mut().for_each(|v| *v += bias);
                }
            }
            (Tensor::from_vec(&[n, o, oh, ow], out).unwrap(), win)
        };
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.any_grad(&parents);
        self.push(out.0, Op::Conv2d { x, w, b, win: out.1 }, rg)
    }

    /// Transposed convolution with weight layout `[c_in, c_out, kh, kw]`.
    pub fn conv_transpose2d(&self, x: Var, w: Var, b: Option<Var>, stride: (usize, usize), pad: (usize, usize)) -> Var {
        let out = {
            let xv = self.value(x);
            let wv = self.value(w);
            let (n, c, h, wd) = dims4(xv.shape());
            let (wc, o, kh, kw) = dims4(wv.shape());
            assert_eq!(c, wc, "conv_transpose2d: input has {c} channels, weight expects {wc}");
            let win = Window::new((kh, kw), stride, pad);
            let (oh, ow) = win
                .conv_transpose_out(h, wd)
                .unwrap_or_else(|| panic!("conv_transpose2d: empty output for {h}x{wd}"));
            let okk = o * kh * kw;
            let mut out = vec![0.0; n * o * oh * ow];
            let mut cols = vec![0.0; okk * h * wd];
            for s in 0..n {
                gemm(okk, c, h * wd, wv.data(), true, &xv.data()[s * c * h * wd..(s + 1) * c * h * wd], false, &mut cols, false);
                col2im(&cols, o, oh, ow, &win, h, wd, &mut out[s * o * oh * ow..(s + 1) * o * oh * ow]);
            }
            if let Some(b) = b {
                let bv = self.value(b);
                assert_eq!(bv.len(), o);
                for (i, chunk) in out.chunks_mut(oh * ow).enumerate() {
                    let bias = bv.data()[i % o];
                    chunk.iter_mut().for_each(|v| *v += bias);
                }
            }
            (Tensor::from_vec(&[n, o, oh, ow], out).unwrap(), win)
        };
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.any_grad(&parents);
        self.push(out.0, Op::ConvTranspose2d { x, w, b, win: out.1 }, rg)
    }

    pub fn max_pool2d(&self, x: Var, kernel: usize, stride: usize) -> Var {
        let (value, argmax) = {
            let xv = self.value(x);
            let (n, c, h, w) = dims4(xv.shape());
            assert!(h >= kernel && w >= kernel, "max_pool2d: input {h}x{w} smaller than kernel {kernel}");
            let oh = (h - kernel) / stride + 1;
            let ow = (w - kernel) / stride + 1;
            let mut out = Vec::with_capacity(n * c * oh * ow);
            let mut argmax = Vec::with_capacity(n * c * oh * ow);
            let data = xv.data();
            for plane in 0..n * c {
                let base = plane * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut arg = base;
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                                if data[idx] > best {
                                    best = data[idx];
                                    arg = idx;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(arg);
                    }
                }
            }
            (Tensor::from_vec(&[n, c, oh, ow], out).unwrap(), argmax)
        };
        let rg = self.any_grad(&[x]);
        self.push(value, Op::MaxPool { x, argmax }, rg)
    }

    pub fn relu(&self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Relu { x }, rg)
    }

    /// Per-channel normalization of a `[n, c, ...]` tensor followed by the
    /// affine map `gamma * xhat + beta`.
    pub fn batch_norm(&self, x: Var, gamma: Var, beta: Var, stats: &NormStats, eps: f64) -> Var {
        let (value, xhat, inv_std, batch_stats) = {
            let xv = self.value(x);
            let gv = self.value(gamma);
            let bv = self.value(beta);
            let shape = xv.shape();
            assert!(shape.len() >= 2, "batch_norm needs [n, c, ...]");
            let (n, c) = (shape[0], shape[1]);
            let spatial: usize = shape[2..].iter().product();
            assert_eq!(gv.len(), c);
            assert_eq!(bv.len(), c);
            let data = xv.data();
            let count = (n * spatial) as f64;
            let (mean, var) = match stats {
                NormStats::Batch => {
                    let mut mean = vec![0.0; c];
                    let mut var = vec![0.0; c];
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * spatial;
                            mean[ch] += data[off..off + spatial].iter().sum::<f64>();
                        }
                    }
                    mean.iter_mut().for_each(|m| *m /= count);
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * spatial;
                            var[ch] += data[off..off + spatial].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= count);
                    (mean, var)
                }
                NormStats::Running { mean, var } => {
                    assert_eq!(mean.len(), c);
                    (mean.clone(), var.clone())
                }
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut xhat = vec![0.0; data.len()];
            let mut out = vec![0.0; data.len()];
            for s in 0..n {
                for ch in 0..c {
                    let off = (s * c + ch) * spatial;
                    for i in off..off + spatial {
                        xhat[i] = (data[i] - mean[ch]) * inv_std[ch];
                        out[i] = gv.data()[ch] * xhat[i] + bv.data()[ch];
                    }
                }
            }
            let batch_stats = matches!(stats, NormStats::Batch).then_some((mean, var));
            (Tensor::from_vec(shape, out).unwrap(), xhat, inv_std, batch_stats)
        };
        let rg = self.any_grad(&[x, gamma, beta]);
        let batch = matches!(stats, NormStats::Batch);
        self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch, stats: batch_stats }, rg)
    }

    /// `x [n, in] * w[out, in]^T + b`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let value = {
            let xv = self.value(x);
            let wv = self.value(w);
            assert_eq!(xv.ndim(), 2, "linear expects [n, in]");
            let (n, inp) = (xv.shape()[0], xv.shape()[1]);
            let (out, win) = (wv.shape()[0], wv.shape()[1]);
            assert_eq!(inp, win, "linear: input width {inp} vs weight {win}");
            let mut y = vec![0.0; n * out];
            gemm(n, inp, out, xv.data(), false, wv.data(), true, &mut y, false);
            if let Some(b) = b {
                let bv = self.value(b);
                for row in y.chunks_mut(out) {
                    row.iter_mut().zip(bv.data()).for_each(|(v, b)| *v += b);
                }
            }
            Tensor::from_vec(&[n, out], y).unwrap()
        };
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.any_grad(&parents);
        self.push(value, Op::Linear { x, w, b }, rg)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape).expect("reshape: element count changed");
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Reshape { x }, rg)
    }

    /// Concatenates `[n, d_i]` matrices along the column axis.
    pub fn concat_cols(&self, xs: &[Var]) -> Var {
        let (value, widths) = {
            let vals: Vec<_> = xs.iter().map(|&v| self.value(v)).collect();
            let n = vals[0].shape()[0];
            let widths: Vec<usize> = vals
                .iter()
                .map(|v| {
                    assert_eq!(v.ndim(), 2);
                    assert_eq!(v.shape()[0], n);
                    v.shape()[1]
                })
                .collect();
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(n * total);
            for row in 0..n {
                for (v, &wd) in vals.iter().zip(&widths) {
                    out.extend_from_slice(&v.data()[row * wd..(row + 1) * wd]);
                }
            }
            (Tensor::from_vec(&[n, total], out).unwrap(), widths)
        };
        let rg = self.any_grad(xs);
        self.push(value, Op::ConcatCols { xs: xs.to_vec(), widths }, rg)
    }

    pub fn narrow_cols(&self, x: Var, start: usize, width: usize) -> Var {
        let value = {
            let xv = self.value(x);
            let (n, total) = (xv.shape()[0], xv.shape()[1]);
            assert!(start + width <= total);
            let mut out = Vec::with_capacity(n * width);
            for row in 0..n {
                out.extend_from_slice(&xv.data()[row * total + start..row * total + start + width]);
            }
            Tensor::from_vec(&[n, width], out).unwrap()
        };
        let rg = self.any_grad(&[x]);
        self.push(value, Op::NarrowCols { x, start, width }, rg)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(&self.value(b), |x, y| x * y).expect("mul: shape mismatch");
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Mul { a, b }, rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(&self.value(b), |x, y| x + y).expect("add: shape mismatch");
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Add { a, b }, rg)
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Scale { x, c }, rg)
    }

    pub fn sum(&self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sum { x }, rg)
    }

    /// `c * sum(x^2)`.
    pub fn sum_squares(&self, x: Var, c: f64) -> Var {
        let value = Tensor::scalar(c * self.value(x).data().iter().map(|v| v * v).sum::<f64>());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::SumSquares { x, c }, rg)
    }

    /// Picks column `idx[r]` from every row `r` of an `[n, k]` matrix.
    pub fn gather(&self, x: Var, idx: &[usize]) -> Var {
        let value = {
            let xv = self.value(x);
            let (n, k) = (xv.shape()[0], xv.shape()[1]);
            assert_eq!(idx.len(), n);
            let out = idx
                .iter()
                .enumerate()
                .map(|(r, &c)| {
                    assert!(c < k, "gather: column {c} out of range {k}");
                    xv.data()[r * k + c]
                })
                .collect();
            Tensor::from_vec(&[n], out).unwrap()
        };
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Gather { x, idx: idx.to_vec() }, rg)
    }

    /// Element-wise relaxed quantization (see [`DaqParams::soft`]).
    pub fn daq(&self, x: Var, params: DaqParams) -> Var {
        let (value, slope) = {
            let xv = self.value(x);
            let mut out = Vec::with_capacity(xv.len());
            let mut slope = Vec::with_capacity(xv.len());
            for &d in xv.data() {
                let (p, dp) = params.soft(d);
                out.push(p);
                slope.push(dp);
            }
            (Tensor::from_vec(xv.shape(), out).unwrap(), slope)
        };
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Daq { x, slope }, rg)
    }

    /// Mean over rows of `-sum_c target[c] * max(log softmax(logits)[c], log_floor)`.
    pub fn soft_cross_entropy(&self, logits: Var, target: &Tensor, log_floor: f64) -> Var {
        let (loss, probs, live) = {
            let lv = self.value(logits);
            assert_eq!(lv.shape(), target.shape(), "soft_cross_entropy: shape mismatch");
            let (n, k) = (lv.shape()[0], lv.shape()[1]);
            let mut probs = vec![0.0; n * k];
            let mut live = vec![true; n * k];
            let mut total = 0.0;
            for r in 0..n {
                let row = &lv.data()[r * k..(r + 1) * k];
                let log_p = log_softmax(row);
                for c in 0..k {
                    probs[r * k + c] = log_p[c].exp();
                    let lp = if log_p[c] < log_floor {
                        live[r * k + c] = false;
                        log_floor
                    } else {
                        log_p[c]
                    };
                    total -= target.data()[r * k + c] * lp;
                }
            }
            (total / n as f64, Tensor::from_vec(&[n, k], probs).unwrap(), live)
        };
        let rg = self.any_grad(&[logits]);
        self.push(Tensor::scalar(loss), Op::SoftCrossEntropy { logits, probs, target: target.clone(), live }, rg)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Grads {
        let seed = {
            let v = self.value(root);
            assert_eq!(v.len(), 1, "backward needs a scalar root; use backward_with");
            Tensor::full(v.shape(), 1.0)
        };
        self.backward_with(root, seed)
    }

    pub fn backward_with(&self, root: Var, seed: Tensor) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.shape(), seed.shape(), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { grads }
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn wants(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn backprop_node(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, win } => {
            let xv = val(*x);
            let wv = val(*w);
            let (n, c, h, wd) = dims4(xv.shape());
            let (o, _, kh, kw) = dims4(wv.shape());
            let (_, _, oh, ow) = dims4(g.shape());
            let ckk = c * kh * kw;
            let need_x = wants(nodes, *x);
            let need_w = wants(nodes, *w);
            let mut dx = need_x.then(|| vec![0.0; xv.len()]);
            let mut dw = need_w.then(|| vec![0.0; wv.len()]);
            let mut dcols = vec![0.0; ckk * oh * ow];
            for s in 0..n {
                let gs = &g.data()[s * o * oh * ow..(s + 1) * o * oh * ow];
                let img = &xv.data()[s * c * h * wd..(s + 1) * c * h * wd];
                if let Some(dw) = dw.as_mut() {
                    let cols = im2col(img, c, h, wd, win, oh, ow);
                    gemm(o, oh * ow, ckk, gs, false, &cols, true, dw, true);
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(ckk, o, oh * ow, wv.data(), true, gs, false, &mut dcols, false);
                    col2im(&dcols, c, h, wd, win, oh, ow, &mut dx[s * c * h * wd..(s + 1) * c * h * wd]);
                }
            }
            if let Some(b) = b {
                if wants(nodes, *b) {
                    let mut db = vec![0.0; o];
                    for (i, chunk) in g.data().chunks(oh * ow).enumerate() {
                        db[i % o] += chunk.iter().sum::<f64>();
                    }
                    accumulate(nodes, grads, *b, Tensor::from_vec(&[o], db).unwrap());
                }
            }
            if let Some(dx) = dx {
                accumulate(nodes, grads, *x, Tensor::from_vec(xv.shape(), dx).unwrap());
            }
            if let Some(dw) = dw {
                accumulate(nodes, grads, *w, Tensor::from_vec(wv.shape(), dw).unwrap());
            }
        }
        Op::ConvTranspose2d { x, w, b, win } => {
            let xv = val(*x);
            let wv = val(*w);
            let (n, c, h, wd) = dims4(xv.shape());
            let (_, o, kh, kw) = dims4(wv.shape());
            let (_, _, oh, ow) = dims4(g.shape());
            let okk = o * kh * kw;
            let need_x = wants(nodes, *x);
            let need_w = wants(nodes, *w);
            let mut dx = need_x.then(|| vec![0.0; xv.len()]);
            let mut dw = need_w.then(|| vec![0.0; wv.len()]);
            if need_x || need_w {
                for s in 0..n {
                    let gs = &g.data()[s * o * oh * ow..(s + 1) * o * oh * ow];
                    let dcols = im2col(gs, o, oh, ow, win, h, wd);
                    if let Some(dx) = dx.as_mut() {
                        gemm(c, okk, h * wd, wv.data(), false, &dcols, false, &mut dx[s * c * h * wd..(s + 1) * c * h * wd], false);
                    }
                    if let Some(dw) = dw.as_mut() {
                        let img = &xv.data()[s * c * h * wd..(s + 1) * c * h * wd];
                        gemm(c, h * wd, okk, img, false, &dcols, true, dw, true);
                    }
                }
            }
            if let Some(b) = b {
                if wants(nodes, *b) {
                    let mut db = vec![0.0; o];
                    for (i, chunk) in g.data().chunks(oh * ow).enumerate() {
                        db[i % o] += chunk.iter().sum::<f64>();
                    }
                    accumulate(nodes, grads, *b, Tensor::from_vec(&[o], db).unwrap());
                }
            }
            if let Some(dx) = dx {
                accumulate(nodes, grads, *x, Tensor::from_vec(xv.shape(), dx).unwrap());
            }
            if let Some(dw) = dw {
                accumulate(nodes, grads, *w, Tensor::from_vec(wv.shape(), dw).unwrap());
            }
        }
        Op::MaxPool { x, argmax } => {
            let mut dx = Tensor::zeros(val(*x).shape());
            let d = dx.data_mut();
            for (gi, &src) in g.data().iter().zip(argmax) {
                d[src] += gi;
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Relu { x } => {
            let dx = val(*x).zip_map(g, |xi, gi| if xi > 0.0 { gi } else { 0.0 }).unwrap();
            accumulate(nodes, grads, *x, dx);
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch, .. } => {
            let shape = val(*x).shape();
            let (n, c) = (shape[0], shape[1]);
            let spatial: usize = shape[2..].iter().product();
            let gv = val(*gamma).data();
            let gd = g.data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for s in 0..n {
                for ch in 0..c {
                    let off = (s * c + ch) * spatial;
                    for i in off..off + spatial {
                        dgamma[ch] += gd[i] * xhat[i];
                        dbeta[ch] += gd[i];
                    }
                }
            }
            if wants(nodes, *x) {
                let mut dx = vec![0.0; gd.len()];
                let m = (n * spatial) as f64;
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * spatial;
                        for i in off..off + spatial {
                            dx[i] = if *batch {
                                // dxhat = g * gamma; sums of dxhat are gamma * dbeta, gamma * dgamma
                                gv[ch] * inv_std[ch] * (gd[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m)
                            } else {
                                gv[ch] * inv_std[ch] * gd[i]
                            };
                        }
                    }
                }
                accumulate(nodes, grads, *x, Tensor::from_vec(shape, dx).unwrap());
            }
            accumulate(nodes, grads, *gamma, Tensor::from_vec(&[c], dgamma).unwrap());
            accumulate(nodes, grads, *beta, Tensor::from_vec(&[c], dbeta).unwrap());
        }
        Op::Linear { x, w, b } => {
            let xv = val(*x);
            let wv = val(*w);
            let (n, inp) = (xv.shape()[0], xv.shape()[1]);
            let out = wv.shape()[0];
            if wants(nodes, *x) {
                let mut dx = vec![0.0; n * inp];
                gemm(n, out, inp, g.data(), false, wv.data(), false, &mut dx, false);
                accumulate(nodes, grads, *x, Tensor::from_vec(&[n, inp], dx).unwrap());
            }
            if wants(nodes, *w) {
                let mut dw = vec![0.0; out * inp];
                gemm(out, n, inp, g.data(), true, xv.data(), false, &mut dw, false);
                accumulate(nodes, grads, *w, Tensor::from_vec(&[out, inp], dw).unwrap());
            }
            if let Some(b) = b {
                let mut db = vec![0.0; out];
                for row in g.data().chunks(out) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                accumulate(nodes, grads, *b, Tensor::from_vec(&[out], db).unwrap());
            }
        }
        Op::Reshape { x } => {
            let dx = g.clone().reshape(val(*x).shape()).unwrap();
            accumulate(nodes, grads, *x, dx);
        }
        Op::ConcatCols { xs, widths } => {
            let n = g.shape()[0];
            let total: usize = widths.iter().sum();
            let mut start = 0;
            for (&v, &wd) in xs.iter().zip(widths) {
                if wants(nodes, v) {
                    let mut d = Vec::with_capacity(n * wd);
                    for r in 0..n {
                        d.extend_from_slice(&g.data()[r * total + start..r * total + start + wd]);
                    }
                    accumulate(nodes, grads, v, Tensor::from_vec(&[n, wd], d).unwrap());
                }
                start += wd;
            }
        }
        Op::NarrowCols { x, start, width } => {
            let shape = val(*x).shape();
            let (n, total) = (shape[0], shape[1]);
            let mut dx = Tensor::zeros(shape);
            let d = dx.data_mut();
            for r in 0..n {
                d[r * total + start..r * total + start + width].copy_from_slice(&g.data()[r * width..(r + 1) * width]);
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Mul { a, b } => {
            if wants(nodes, *a) {
                accumulate(nodes, grads, *a, g.zip_map(val(*b), |gi, bi| gi * bi).unwrap());
            }
            if wants(nodes, *b) {
                accumulate(nodes, grads, *b, g.zip_map(val(*a), |gi, ai| gi * ai).unwrap());
            }
        }
        Op::Add { a, b } => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Scale { x, c } => {
            accumulate(nodes, grads, *x, g.map(|v| v * c));
        }
        Op::Sum { x } => {
            let s = g.item();
            accumulate(nodes, grads, *x, Tensor::full(val(*x).shape(), s));
        }
        Op::SumSquares { x, c } => {
            let s = g.item();
            accumulate(nodes, grads, *x, val(*x).map(|v| 2.0 * c * s * v));
        }
        Op::Gather { x, idx } => {
            let shape = val(*x).shape();
            let k = shape[1];
            let mut dx = Tensor::zeros(shape);
            let d = dx.data_mut();
            for (r, &c) in idx.iter().enumerate() {
                d[r * k + c] += g.data()[r];
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Daq { x, slope, .. } => {
            let mut dx = g.clone();
            dx.data_mut().iter_mut().zip(slope).for_each(|(d, s)| *d *= s);
            accumulate(nodes, grads, *x, dx);
        }
        Op::SoftCrossEntropy { logits, probs, target, live } => {
            let s = g.item();
            let (n, k) = (probs.shape()[0], probs.shape()[1]);
            let mut d = vec![0.0; n * k];
            for r in 0..n {
                let row = r * k..(r + 1) * k;
                let t_live: f64 = row.clone().filter(|&i| live[i]).map(|i| target.data()[i]).sum();
                for i in row {
                    let own = if live[i] { target.data()[i] } else { 0.0 };
                    d[i] = s * (probs.data()[i] * t_live - own) / n as f64;
                }
            }
            accumulate(nodes, grads, *logits, Tensor::from_vec(&[n, k], d).unwrap());
        }
    }
}
