use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mask::{ActivationSet, LayerSpec, PathwayMask};
use crate::autograd::{NormStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Window};

#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv2d(Conv2dLayer),
    BatchNorm(BatchNormLayer),
    Relu,
    MaxPool { kernel: usize, stride: usize },
    Flatten,
    Linear(LinearLayer),
}

/// Built-in architectures, selectable by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    /// Three conv/ReLU stages for desk-scale experiments.
    #[serde(rename = "toy3")]
    Toy3,
    /// CIFAR-style AlexNet (five conv stages, single linear head).
    #[serde(rename = "alexnet32")]
    AlexNet32,
    /// VGG-11 with batch normalization for 32x32 inputs.
    #[serde(rename = "vgg11bn32")]
    Vgg11Bn32,
}

impl Architecture {
    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Toy3 => "toy3",
            Architecture::AlexNet32 => "alexnet32",
            Architecture::Vgg11Bn32 => "vgg11bn32",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "toy3" => Ok(Architecture::Toy3),
            "alexnet32" => Ok(Architecture::AlexNet32),
            "vgg11bn32" => Ok(Architecture::Vgg11Bn32),
            other => Err(Error::Config(format!("unknown architecture {other:?}; expected toy3, alexnet32 or vgg11bn32"))),
        }
    }

    pub fn default_input(&self) -> (usize, usize, usize) {
        match self {
            Architecture::Toy3 => (3, 16, 16),
            Architecture::AlexNet32 | Architecture::Vgg11Bn32 => (3, 32, 32),
        }
    }

    /// Randomly initialized model (He-uniform weights) for the given input size.
    pub fn build(&self, input: (usize, usize, usize), num_classes: usize, seed: u64) -> Result<TargetModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, h, w) = input;
        let mut layers = Vec::new();
        match self {
            Architecture::Toy3 => {
                if h % 4 != 0 || w % 4 != 0 {
                    return Err(Error::Config(format!("toy3 needs input sides divisible by 4, got {h}x{w}")));
                }
                layers.push(conv(&mut rng, c, 8, 3, 1, 1));
                layers.push(Layer::Relu);
                layers.push(Layer::MaxPool { kernel: 2, stride: 2 });
                layers.push(conv(&mut rng, 8, 16, 3, 1, 1));
                layers.push(Layer::Relu);
                layers.push(Layer::MaxPool { kernel: 2, stride: 2 });
                layers.push(conv(&mut rng, 16, 16, 3, 1, 1));
                layers.push(Layer::Relu);
                layers.push(Layer::Flatten);
                layers.push(linear(&mut rng, 16 * (h / 4) * (w / 4), num_classes));
            }
            Architecture::AlexNet32 => {
                layers.push(conv(&mut rng, c, 64, 11, 4, 5));
                layers.push(Layer::Relu);
                layers.push(Layer::MaxPool { kernel: 2, stride: 2 });
                layers.push(conv(&mut rng, 64, 192, 5, 1, 2));
                layers.push(Layer::Relu);
                layers.push(Layer::MaxPool { kernel: 2, stride: 2 });
                layers.push(conv(&mut rng, 192, 384, 3, 1, 1));
                layers.push(Layer::Relu);
                layers.push(conv(&mut rng, 384, 256, 3, 1, 1));
                layers.push(Layer::Relu);
                layers.push(conv(&mut rng, 256, 256, 3, 1, 1));
                layers.push(Layer::Relu);
                layers.push(Layer::MaxPool { kernel: 2, stride: 2 });
                layers.push(Layer::Flatten);
                let side = |s: usize| ((s + 10 - 11) / 4 + 1) / 8;
                layers.push(linear(&mut rng, 256 * side(h) * side(w), num_classes));
            }
            Architecture::Vgg11Bn32 => {
                let plan: [Option<usize>; 13] =
                    [Some(64), None, Some(128), None, Some(256), Some(256), None, Some(512), Some(512), None, Some(512), Some(512), None];
                let mut cin = c;
                for step in plan {
                    match step {
                        Some(cout) => {
                            layers.push(conv(&mut rng, cin, cout, 3, 1, 1));
                            layers.push(Layer::BatchNorm(BatchNormLayer {
                                gamma: Tensor::ones(&[cout]),
                                beta: Tensor::zeros(&[cout]),
                                running_mean: vec![0.0; cout],
                                running_var: vec![1.0; cout],
                                eps: 1e-5,
                            }));
                            layers.push(Layer::Relu);
                            cin = cout;
                        }
                        None => layers.push(Layer::MaxPool { kernel: 2, stride: 2 }),
                    }
                }
                layers.push(Layer::Flatten);
                layers.push(linear(&mut rng, 512 * (h / 32) * (w / 32), num_classes));
            }
        }
        TargetModel::new(self.name(), input, layers)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).unwrap()
}

fn conv(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Layer {
    let fan_in = (cin * k * k) as f64;
    Layer::Conv2d(Conv2dLayer {
        weight: uniform(rng, &[cout, cin, k, k], (6.0 / fan_in).sqrt()),
        bias: Some(uniform(rng, &[cout], 1.0 / fan_in.sqrt())),
        stride,
        pad,
    })
}

fn linear(rng: &mut ChaCha8Rng, inp: usize, out: usize) -> Layer {
    let fan_in = inp as f64;
    Layer::Linear(LinearLayer {
        weight: uniform(rng, &[out, inp], (6.0 / fan_in).sqrt()),
        bias: Some(uniform(rng, &[out], 1.0 / fan_in.sqrt())),
    })
}

/// A frozen convolutional classifier instrumented at its spatial ReLU outputs.
#[derive(Clone, Debug)]
pub struct TargetModel {
    arch: String,
    input: (usize, usize, usize),
    layers: Vec<Layer>,
    specs: Vec<LayerSpec>,
    num_classes: usize,
}

/// Tape handles for one bound copy of the model parameters.
pub(crate) struct BoundLayers {
    vars: Vec<Vec<Var>>,
}

/// Result of [`TargetModel::masked_gradients`].
#[derive(Clone, Debug)]
pub struct MaskedGradients {
    pub logits: Tensor,
    /// Gradient of the class logit with respect to each captured (pre-mask)
    /// activation, `[n, c, h, w]` per layer.
    pub layer_grads: Vec<Tensor>,
    /// Activations as they flowed onward (mask applied), per layer.
    pub masked_acts: Vec<Tensor>,
    pub input_grad: Tensor,
}

impl TargetModel {
    /// Validates the layer stack by shape propagation and locates the
    /// capture points (ReLUs applied to rank-4 tensors).
    pub fn new(arch: &str, input: (usize, usize, usize), layers: Vec<Layer>) -> Result<Self> {
        let mut shape = vec![input.0, input.1, input.2];
        let mut specs = Vec::new();
        for (pos, layer) in layers.iter().enumerate() {
            shape = match layer {
                Layer::Conv2d(c) => {
                    let ws = c.weight.shape();
                    if shape.len() != 3 || ws.len() != 4 || ws[1] != shape[0] {
                        return Err(Error::Config(format!("layer {pos}: conv weight {ws:?} cannot consume {shape:?}")));
                    }
                    if c.bias.as_ref().is_some_and(|b| b.len() != ws[0]) {
                        return Err(Error::Config(format!("layer {pos}: conv bias length mismatch")));
                    }
                    let win = Window::new((ws[2], ws[3]), (c.stride, c.stride), (c.pad, c.pad));
                    let (oh, ow) = win
                        .conv_out(shape[1], shape[2])
                        .ok_or_else(|| Error::Config(format!("layer {pos}: input {shape:?} smaller than kernel")))?;
                    vec![ws[0], oh, ow]
                }
                Layer::BatchNorm(b) => {
                    if b.gamma.len() != shape[0] || b.beta.len() != shape[0] || b.running_mean.len() != shape[0] || b.running_var.len() != shape[0] {
                        return Err(Error::Config(format!("layer {pos}: normalization size mismatch for {shape:?}")));
                    }
                    shape
                }
                Layer::Relu => {
                    if shape.len() == 3 {
                        specs.push(LayerSpec::new(shape[0], shape[1], shape[2]));
                    }
                    shape
                }
                Layer::MaxPool { kernel, stride } => {
                    if shape.len() != 3 || shape[1] < *kernel || shape[2] < *kernel || *stride == 0 {
                        return Err(Error::Config(format!("layer {pos}: cannot pool {shape:?}")));
                    }
                    vec![shape[0], (shape[1] - kernel) / stride + 1, (shape[2] - kernel) / stride + 1]
                }
                Layer::Flatten => vec![shape.iter().product()],
                Layer::Linear(l) => {
                    let ws = l.weight.shape();
                    if shape.len() != 1 || ws[1] != shape[0] {
                        return Err(Error::Config(format!("layer {pos}: linear weight {ws:?} cannot consume {shape:?}")));
                    }
                    vec![ws[0]]
                }
            };
        }
        if shape.len() != 1 {
            return Err(Error::Config(format!("model output must be a class vector, got {shape:?}")));
        }
        if specs.is_empty() {
            return Err(Error::Config("model has no convolutional ReLU capture points".into()));
        }
        Ok(Self { arch: arch.to_string(), input, layers, specs, num_classes: shape[0] })
    }

    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layer_specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Every parameter tensor with a stable name, in layer order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv2d(c) => {
                    out.push((format!("{i}.weight"), &c.weight));
                    if let Some(b) = &c.bias {
                        out.push((format!("{i}.bias"), b));
                    }
                }
                Layer::Linear(l) => {
                    out.push((format!("{i}.weight"), &l.weight));
                    if let Some(b) = &l.bias {
                        out.push((format!("{i}.bias"), b));
                    }
                }
                Layer::BatchNorm(b) => {
                    out.push((format!("{i}.gamma"), &b.gamma));
                    out.push((format!("{i}.beta"), &b.beta));
                }
                _ => {}
            }
        }
        out
    }

    /// Parameters plus normalization running statistics, for persistence.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::BatchNorm(b) = layer {
                let c = b.running_mean.len();
                out.push((format!("{i}.running_mean"), Tensor::from_vec(&[c], b.running_mean.clone()).unwrap()));
                out.push((format!("{i}.running_var"), Tensor::from_vec(&[c], b.running_var.clone()).unwrap()));
            }
        }
        out
    }

    /// Overwrites parameters and statistics from [`TargetModel::state_tensors`] output.
    pub fn load_state(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let expected = self.state_tensors();
        if expected.len() != tensors.len() {
            return Err(Error::Config(format!("checkpoint has {} tensors, model needs {}", tensors.len(), expected.len())));
        }
        for ((name, want), (got_name, got)) in expected.iter().zip(tensors) {
            if name != got_name || want.shape() != got.shape() {
                return Err(Error::Config(format!("checkpoint tensor {got_name} {:?} does not match {name} {:?}", got.shape(), want.shape())));
            }
        }
        let mut it = tensors.iter().map(|(_, t)| t.clone());
        for layer in &mut self.layers {
            match layer {
                Layer::Conv2d(c) => {
                    c.weight = it.next().unwrap();
                    if c.bias.is_some() {
                        c.bias = it.next();
                    }
                }
                Layer::Linear(l) => {
                    l.weight = it.next().unwrap();
                    if l.bias.is_some() {
                        l.bias = it.next();
                    }
                }
                Layer::BatchNorm(b) => {
                    b.gamma = it.next().unwrap();
                    b.beta = it.next().unwrap();
                }
                _ => {}
            }
        }
        for layer in &mut self.layers {
            if let Layer::BatchNorm(b) = layer {
                b.running_mean = it.next().unwrap().into_data();
                b.running_var = it.next().unwrap().into_data();
            }
        }
        Ok(())
    }

    /// CRC-32 over all parameters and normalization statistics.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for (_, t) in self.named_tensors() {
            for v in t.data() {
                h.update(&v.to_le_bytes());
            }
        }
        for layer in &self.layers {
            if let Layer::BatchNorm(b) = layer {
                for v in b.running_mean.iter().chain(&b.running_var) {
                    h.update(&v.to_le_bytes());
                }
            }
        }
        h.finalize()
    }

    pub fn check_input(&self, images: &Tensor) -> Result<usize> {
        let s = images.shape();
        let (c, h, w) = self.input;
        if s.len() != 4 || s[1] != c || s[2] != h || s[3] != w {
            return Err(Error::Shape(format!("model {} expects input [n, {c}, {h}, {w}], got {s:?}", self.arch)));
        }
        if s[0] == 0 {
            return Err(Error::Shape("empty input batch".into()));
        }
        Ok(s[0])
    }

    pub(crate) fn bind(&self, tape: &Tape, trainable: bool) -> BoundLayers {
        let leaf = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        let vars = self
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::Conv2d(c) => std::iter::once(leaf(&c.weight)).chain(c.bias.as_ref().map(leaf)).collect(),
                Layer::Linear(l) => std::iter::once(leaf(&l.weight)).chain(l.bias.as_ref().map(leaf)).collect(),
                Layer::BatchNorm(b) => vec![leaf(&b.gamma), leaf(&b.beta)],
                _ => Vec::new(),
            })
            .collect();
        BoundLayers { vars }
    }

    /// Layer-stack position right after capture point `idx`.
    fn position_after_capture(&self, idx: usize) -> usize {
        let mut seen = 0;
        let mut rank4 = true;
        for (pos, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Relu if rank4 => {
                    if seen == idx {
                        return pos + 1;
                    }
                    seen += 1;
                }
                Layer::Flatten => rank4 = false,
                _ => {}
            }
        }
        unreachable!("capture index {idx} out of range")
    }

    /// Runs layers `start..` on `x`; `hook(i, a)` sees capture point `i`
    /// (numbered globally) and returns the tensor that flows onward.
    pub(crate) fn run(
        &self,
        tape: &Tape,
        bound: &BoundLayers,
        mut x: Var,
        start: usize,
        first_capture: usize,
        hook: &mut dyn FnMut(usize, Var) -> Var,
    ) -> Var {
        let mut capture = first_capture;
        for (layer, vars) in self.layers.iter().zip(&bound.vars).skip(start) {
            x = match layer {
                Layer::Conv2d(c) => tape.conv2d(x, vars[0], vars.get(1).copied(), (c.stride, c.stride), (c.pad, c.pad)),
                Layer::BatchNorm(b) => {
                    let stats = NormStats::Running { mean: b.running_mean.clone(), var: b.running_var.clone() };
                    tape.batch_norm(x, vars[0], vars[1], &stats, b.eps)
                }
                Layer::Relu => {
                    let y = tape.relu(x);
                    if tape.shape(y).len() == 4 {
                        let out = hook(capture, y);
                        capture += 1;
                        out
                    } else {
                        y
                    }
                }
                Layer::MaxPool { kernel, stride } => tape.max_pool2d(x, *kernel, *stride),
                Layer::Flatten => {
                    let s = tape.shape(x);
                    tape.reshape(x, &[s[0], s[1..].iter().product()])
                }
                Layer::Linear(_) => tape.linear(x, vars[0], vars.get(1).copied()),
            };
        }
        x
    }

    /// Plain forward pass, logits `[n, num_classes]`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        self.check_input(images)?;
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let x = tape.constant(images.clone());
        let out = self.run(&tape, &bound, x, 0, 0, &mut |_, a| a);
        let logits = tape.value(out).clone();
        Ok(logits)
    }

    /// Forward pass that also records every capture point's activations.
    pub fn capture_activations(&self, images: &Tensor) -> Result<(Tensor, ActivationSet)> {
        self.check_input(images)?;
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let x = tape.constant(images.clone());
        let mut captured = Vec::new();
        let out = self.run(&tape, &bound, x, 0, 0, &mut |_, a| {
            captured.push(a);
            a
        });
        let logits = tape.value(out).clone();
        let acts = captured.into_iter().map(|v| tape.value(v).clone()).collect();
        Ok((logits, ActivationSet::new(acts)?))
    }

    /// Stacks per-sample masks into `[n, c, h, w]` tensors; a single mask
    /// is broadcast over the batch.
    pub fn stack_masks(&self, masks: &[PathwayMask], n: usize) -> Result<Vec<Tensor>> {
        if masks.len() != n && masks.len() != 1 {
            return Err(Error::Shape(format!("{} masks for a batch of {n}", masks.len())));
        }
        for m in masks {
            m.check_specs(&self.specs)?;
        }
        (0..self.specs.len())
            .map(|layer| {
                let items: Vec<Tensor> = (0..n).map(|s| masks[if masks.len() == 1 { 0 } else { s }].layers()[layer].clone()).collect();
                Tensor::stack(&items)
            })
            .collect()
    }

    /// Forward pass where each capture point's output `A_i` is replaced by
    /// `P_i * A_i`; downstream layers see the already-masked values.
    pub fn masked_forward(&self, images: &Tensor, masks: &[PathwayMask]) -> Result<Tensor> {
        let n = self.check_input(images)?;
        let stacked = self.stack_masks(masks, n)?;
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let mask_vars: Vec<Var> = stacked.into_iter().map(|t| tape.constant(t)).collect();
        let x = tape.constant(images.clone());
        let out = self.run(&tape, &bound, x, 0, 0, &mut |i, a| tape.mul(a, mask_vars[i]));
        let logits = tape.value(out).clone();
        Ok(logits)
    }

    /// Masked forward on an existing tape with (possibly differentiable)
    /// mask tensors `[n, c, h, w]`.
    pub(crate) fn masked_forward_on(&self, tape: &Tape, bound: &BoundLayers, x: Var, masks: &[Var]) -> Var {
        self.run(tape, bound, x, 0, 0, &mut |i, a| tape.mul(a, masks[i]))
    }

    /// Backpropagates each sample's `classes[s]` logit through the masked
    /// forward pass.
    pub fn masked_gradients(&self, images: &Tensor, masks: &[PathwayMask], classes: &[usize]) -> Result<MaskedGradients> {
        let n = self.check_input(images)?;
        for m in masks {
            m.require_finalized()?;
        }
        if classes.len() != n {
            return Err(Error::Shape(format!("{} class indices for a batch of {n}", classes.len())));
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= self.num_classes) {
            return Err(Error::Config(format!("class index {c} out of range for {} classes", self.num_classes)));
        }
        let stacked = self.stack_masks(masks, n)?;
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let mask_vars: Vec<Var> = stacked.into_iter().map(|t| tape.constant(t)).collect();
        let x = tape.param(images.clone());
        let mut pre = Vec::new();
        let mut post = Vec::new();
        // Re-leafing the ReLU output keeps a handle whose gradient is the
        // pre-mask activation gradient (with downstream effects included).
        let out = self.run(&tape, &bound, x, 0, 0, &mut |i, a| {
            pre.push(a);
            let m = tape.mul(a, mask_vars[i]);
            post.push(m);
            m
        });
        let picked = tape.gather(out, classes);
        let total = tape.sum(picked);
        let grads = tape.backward(total);
        let layer_grads = pre
            .iter()
            .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&tape.shape(v))))
            .collect();
        let input_grad = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(images.shape()));
        let masked_acts = post.iter().map(|&v| tape.value(v).clone()).collect();
        let logits = tape.value(out).clone();
        Ok(MaskedGradients { logits, layer_grads, masked_acts, input_grad })
    }

    /// Evaluates the network downstream of capture point `idx` with the
    /// given activations injected there, returning the `classes` logits and
    /// their gradients with respect to the injected activations.
    pub fn downstream_gradients(&self, idx: usize, acts: &Tensor, classes: &[usize]) -> Result<(Vec<f64>, Tensor)> {
        let spec = self
            .specs
            .get(idx)
            .ok_or_else(|| Error::Config(format!("capture index {idx} out of range")))?;
        let s = acts.shape();
        if s.len() != 4 || s[1..] != spec.dims() {
            return Err(Error::Shape(format!("activations {s:?} do not match capture point {idx} {spec:?}")));
        }
        if classes.len() != s[0] {
            return Err(Error::Shape("one class index per injected sample is required".into()));
        }
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let a = tape.param(acts.clone());
        let start = self.position_after_capture(idx);
        let out = self.run(&tape, &bound, a, start, idx + 1, &mut |_, v| v);
        let picked = tape.gather(out, classes);
        let values = tape.value(picked).data().to_vec();
        let total = tape.sum(picked);
        let grads = tape.backward(total);
        let g = grads.get(a).cloned().unwrap_or_else(|| Tensor::zeros(s));
        Ok((values, g))
    }

    /// Training-time forward with trainable parameters, used to fit desk
    /// fixtures. Returns the tape handles of the parameters in
    /// [`TargetModel::named_tensors`] order.
    pub(crate) fn bind_trainable(&self, tape: &Tape) -> (BoundLayers, Vec<Var>) {
        let bound = self.bind(tape, true);
        let flat = bound.vars.iter().flatten().copied().collect();
        (bound, flat)
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv2d(c) => {
                    out.push(&mut c.weight);
                    if let Some(b) = &mut c.bias {
                        out.push(b);
                    }
                }
                Layer::Linear(l) => {
                    out.push(&mut l.weight);
                    if let Some(b) = &mut l.bias {
                        out.push(b);
                    }
                }
                Layer::BatchNorm(b) => {
                    out.push(&mut b.gamma);
                    out.push(&mut b.beta);
                }
                _ => {}
            }
        }
        out
    }
}

/// Index of the largest entry of each row of `[n, k]` logits.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Row-wise softmax of `[n, k]` logits.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let k = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / z));
    }
    Tensor::from_vec(logits.shape(), out).unwrap()
}
