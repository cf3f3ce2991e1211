//! The pathway generator: per-layer recursive feature embedders bring every
//! captured feature map to a shared resolution, one scorer shared by all
//! layers rates every embedded element, and per-layer recursive decoders
//! map the scores back to native resolution before quantization into a
//! binary mask.

mod config;

pub use config::{auto_filter_size, rfe_iteration_count, GeneratorConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{DaqParams, NormStats, Tape, Var};
use crate::error::{Error, Result};
use crate::instrumentation::{ActivationSet, PathwayMask, TargetModel};
use crate::tensor::Tensor;

/// Training mode relaxes quantization and normalizes with batch statistics;
/// evaluation mode quantizes exactly and uses running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl NormParams {
    fn new(c: usize) -> Self {
        Self { gamma: Tensor::ones(&[c]), beta: Tensor::zeros(&[c]), running_mean: vec![0.0; c], running_var: vec![1.0; c] }
    }
}

/// One weight-shared convolution (or transposed convolution) applied
/// `iterations` times, each iteration with its own normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RecursiveBlock {
    pub weight: Tensor,
    pub bias: Tensor,
    pub norms: Vec<NormParams>,
    pub iterations: usize,
    pub pad: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Per-layer feature patterns at the shared resolution, `[n, c_i, h', w']`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedPatterns {
    pub layers: Vec<Tensor>,
}

/// Intermediate generator outputs for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceScores {
    pub patterns: Vec<Tensor>,
    /// Scorer output at the shared resolution, `[n, c_i, h', w']`.
    pub pdn_scores: Vec<Tensor>,
    /// Decoded scores at native resolution, `[n, c_i, h_i, w_i]`.
    pub decoded: Vec<Tensor>,
}

impl ImportanceScores {
    /// Decoded scores of sample `n`, one `[c, h, w]` tensor per layer.
    pub fn decoded_sample(&self, n: usize) -> Vec<Tensor> {
        self.decoded.iter().map(|t| t.index_outer(n)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub masks: Vec<PathwayMask>,
    pub scores: ImportanceScores,
    pub logits: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    config: GeneratorConfig,
    pub(crate) rfe: Vec<RecursiveBlock>,
    pub(crate) pdn: Vec<Dense>,
    pub(crate) rpd: Vec<RecursiveBlock>,
}

/// Tape handles produced by a generator forward pass.
pub(crate) struct ForwardVars {
    pub patterns: Vec<Var>,
    pub pdn_scores: Vec<Var>,
    pub decoded: Vec<Var>,
    /// Relaxed mask values (training mode only).
    pub relaxed: Vec<Var>,
    /// Normalization nodes in [`Generator::norms_mut`] order.
    pub norm_nodes: Vec<Var>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).unwrap()
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut rfe = Vec::new();
        let mut rpd = Vec::new();
        for (i, spec) in config.layers.iter().enumerate() {
            let c = spec.channels;
            let (kh, kw) = config.filter_sizes[i];
            let iters = config.iterations(i);
            let bound = (6.0 / (c * kh * kw) as f64).sqrt();
            let norms = if config.normalize { iters } else { 0 };
            rfe.push(RecursiveBlock {
                weight: uniform(&mut rng, &[c, c, kh, kw], bound),
                bias: Tensor::zeros(&[c]),
                norms: (0..norms).map(|_| NormParams::new(c)).collect(),
                iterations: iters,
                pad: config.padding(i),
            });
            // the last decoder iteration emits raw scores
            let dec_norms = if config.normalize { iters - 1 } else { 0 };
            rpd.push(RecursiveBlock {
                weight: uniform(&mut rng, &[c, c, kh, kw], bound * 0.5),
                bias: Tensor::full(&[c], config.score_init),
                norms: (0..dec_norms).map(|_| NormParams::new(c)).collect(),
                iterations: iters,
                pad: config.padding(i),
            });
        }
        let width = config.pdn_width();
        let mut pdn = Vec::new();
        for j in 0..config.pdn_depth {
            let inp = if j == 0 { width } else { config.pdn_hidden };
            let out = if j + 1 == config.pdn_depth { width } else { config.pdn_hidden };
            pdn.push(Dense { weight: uniform(&mut rng, &[out, inp], (6.0 / inp as f64).sqrt() * 0.5), bias: Tensor::zeros(&[out]) });
        }
        Ok(Self { config, rfe, pdn, rpd })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Trainable tensors in a fixed order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for block in self.rfe.iter().chain(&self.rpd) {
            out.push(&block.weight);
            out.push(&block.bias);
            for n in &block.norms {
                out.push(&n.gamma);
                out.push(&n.beta);
            }
        }
        for d in &self.pdn {
            out.push(&d.weight);
            out.push(&d.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for block in self.rfe.iter_mut().chain(self.rpd.iter_mut()) {
            out.push(&mut block.weight);
            out.push(&mut block.bias);
            for n in &mut block.norms {
                out.push(&mut n.gamma);
                out.push(&mut n.beta);
            }
        }
        for d in &mut self.pdn {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out
    }

    /// Named tensors for persistence: trainable parameters followed by
    /// running normalization statistics.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (kind, blocks) in [("rfe", &self.rfe), ("rpd", &self.rpd)] {
            for (i, b) in blocks.iter().enumerate() {
                out.push((format!("{kind}.{i}.weight"), b.weight.clone()));
                out.push((format!("{kind}.{i}.bias"), b.bias.clone()));
                for (j, n) in b.norms.iter().enumerate() {
                    let c = n.running_mean.len();
                    out.push((format!("{kind}.{i}.norm.{j}.gamma"), n.gamma.clone()));
                    out.push((format!("{kind}.{i}.norm.{j}.beta"), n.beta.clone()));
                    out.push((format!("{kind}.{i}.norm.{j}.mean"), Tensor::from_vec(&[c], n.running_mean.clone()).unwrap()));
                    out.push((format!("{kind}.{i}.norm.{j}.var"), Tensor::from_vec(&[c], n.running_var.clone()).unwrap()));
                }
            }
        }
        for (j, d) in self.pdn.iter().enumerate() {
            out.push((format!("pdn.{j}.weight"), d.weight.clone()));
            out.push((format!("pdn.{j}.bias"), d.bias.clone()));
        }
        out
    }

    /// Rebuilds a generator from its config and the output of
    /// [`Generator::named_tensors`].
    pub fn from_named_tensors(config: GeneratorConfig, tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut g = Self::new(config)?;
        let expected = g.named_tensors();
        if expected.len() != tensors.len() {
            return Err(Error::Config(format!("checkpoint has {} tensors, generator needs {}", tensors.len(), expected.len())));
        }
        for ((name, want), (got_name, got)) in expected.iter().zip(tensors) {
            if name != got_name || want.shape() != got.shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {got_name} {:?} does not match {name} {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        let mut it = tensors.iter().map(|(_, t)| t.clone());
        for blocks in [&mut g.rfe, &mut g.rpd] {
            for b in blocks.iter_mut() {
                b.weight = it.next().unwrap();
                b.bias = it.next().unwrap();
                for n in &mut b.norms {
                    n.gamma = it.next().unwrap();
                    n.beta = it.next().unwrap();
                    n.running_mean = it.next().unwrap().into_data();
                    n.running_var = it.next().unwrap().into_data();
                }
            }
        }
        for d in &mut g.pdn {
            d.weight = it.next().unwrap();
            d.bias = it.next().unwrap();
        }
        Ok(g)
    }

    pub(crate) fn norms_mut(&mut self) -> Vec<&mut NormParams> {
        self.rfe.iter_mut().chain(self.rpd.iter_mut()).flat_map(|b| b.norms.iter_mut()).collect()
    }

    /// Places the parameters on a tape in [`Generator::params`] order.
    pub(crate) fn bind(&self, tape: &Tape, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }

    fn check_acts(&self, acts: &[Tensor]) -> Result<usize> {
        if acts.len() != self.config.layers.len() {
            return Err(Error::Shape(format!("{} activation layers for a {}-layer generator", acts.len(), self.config.layers.len())));
        }
        let n = acts[0].shape().first().copied().unwrap_or(0);
        for (a, spec) in acts.iter().zip(&self.config.layers) {
            if a.ndim() != 4 || a.shape()[0] != n || a.shape()[1..] != spec.dims() {
                return Err(Error::Shape(format!("activations {:?} do not match generator layer {spec:?}", a.shape())));
            }
        }
        Ok(n)
    }

    #[allow(clippy::too_many_arguments)]
    fn recursive(
        &self,
        tape: &Tape,
        block: &RecursiveBlock,
        w: Var,
        b: Var,
        norm_vars: &[Var],
        x: Var,
        transposed: bool,
        mode: Mode,
        norm_nodes: &mut Vec<Var>,
    ) -> Var {
        let mut h = x;
        for it in 0..block.iterations {
            let before = tape.shape(h);
            h = if transposed {
                tape.conv_transpose2d(h, w, Some(b), (1, 1), block.pad)
            } else {
                tape.conv2d(h, w, Some(b), (1, 1), block.pad)
            };
            let after = tape.shape(h);
            assert_eq!(before[1], after[1], "recursive block changed the channel count");
            let last_decoder_step = transposed && it + 1 == block.iterations;
            if last_decoder_step {
                break;
            }
            if let Some(norm) = block.norms.get(it) {
                let stats = match mode {
                    Mode::Train => NormStats::Batch,
                    Mode::Eval => NormStats::Running { mean: norm.running_mean.clone(), var: norm.running_var.clone() },
                };
                h = tape.batch_norm(h, norm_vars[2 * it], norm_vars[2 * it + 1], &stats, self.config.norm_eps);
                norm_nodes.push(h);
            }
            h = tape.relu(h);
        }
        h
    }

    /// Generator forward pass on `acts` (`[n, c_i, h_i, w_i]` vars).
    pub(crate) fn forward_on(&self, tape: &Tape, params: &[Var], acts: &[Var], mode: Mode) -> ForwardVars {
        let k = self.config.layers.len();
        let (th, tw) = self.config.shared_resolution;
        let n = tape.shape(acts[0])[0];
        let mut cursor = 0;
        let mut take = |count: usize| {
            let s = &params[cursor..cursor + count];
            cursor += count;
            s
        };
        let mut block_vars = Vec::new();
        for block in self.rfe.iter().chain(&self.rpd) {
            block_vars.push(take(2 + 2 * block.norms.len()).to_vec());
        }
        let pdn_vars: Vec<Vec<Var>> = self.pdn.iter().map(|_| take(2).to_vec()).collect();

        let mut norm_nodes = Vec::new();
        let mut patterns = Vec::with_capacity(k);
        for (i, &a) in acts.iter().enumerate() {
            let v = &block_vars[i];
            let p = self.recursive(tape, &self.rfe[i], v[0], v[1], &v[2..], a, false, mode, &mut norm_nodes);
            let s = tape.shape(p);
            assert_eq!(&s[2..], &[th, tw], "feature embedder for layer {i} ended at {s:?}");
            patterns.push(p);
        }

        let flat: Vec<Var> = patterns
            .iter()
            .map(|&p| {
                let s = tape.shape(p);
                tape.reshape(p, &[n, s[1] * s[2] * s[3]])
            })
            .collect();
        let mut h = tape.concat_cols(&flat);
        for (j, v) in pdn_vars.iter().enumerate() {
            h = tape.linear(h, v[0], Some(v[1]));
            if j + 1 < pdn_vars.len() {
                h = tape.relu(h);
            }
        }
        let mut pdn_scores = Vec::with_capacity(k);
        let mut start = 0;
        for spec in &self.config.layers {
            let width = spec.channels * th * tw;
            let cols = tape.narrow_cols(h, start, width);
            pdn_scores.push(tape.reshape(cols, &[n, spec.channels, th, tw]));
            start += width;
        }

        let mut decoded = Vec::with_capacity(k);
        for (i, &s) in pdn_scores.iter().enumerate() {
            let v = &block_vars[k + i];
            let d = self.recursive(tape, &self.rpd[i], v[0], v[1], &v[2..], s, true, mode, &mut norm_nodes);
            let shape = tape.shape(d);
            assert_eq!(&shape[1..], &self.config.layers[i].dims(), "decoder for layer {i} produced {shape:?}");
            decoded.push(d);
        }
        let relaxed = match mode {
            Mode::Train => decoded.iter().map(|&d| tape.daq(d, self.config.daq())).collect(),
            Mode::Eval => Vec::new(),
        };
        ForwardVars { patterns, pdn_scores, decoded, relaxed, norm_nodes }
    }

    /// Folds the batch statistics of a training-mode pass into the running
    /// statistics.
    pub(crate) fn update_running_stats(&mut self, tape: &Tape, norm_nodes: &[Var]) {
        let m = self.config.norm_momentum;
        let count_per_channel: Vec<usize> = norm_nodes
            .iter()
            .map(|&v| {
                let s = tape.shape(v);
                s[0] * s[2..].iter().product::<usize>()
            })
            .collect();
        for ((norm, &node), count) in self.norms_mut().into_iter().zip(norm_nodes).zip(count_per_channel) {
            if let Some((mean, var)) = tape.norm_batch_stats(node) {
                let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
                for c in 0..mean.len() {
                    norm.running_mean[c] = (1.0 - m) * norm.running_mean[c] + m * mean[c];
                    norm.running_var[c] = (1.0 - m) * norm.running_var[c] + m * var[c] * unbias;
                }
            }
        }
    }

    fn run_stage<T>(&self, acts: &[Tensor], mode: Mode, pick: impl FnOnce(&Tape, &ForwardVars) -> T) -> Result<T> {
        self.check_acts(acts)?;
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let vars: Vec<Var> = acts.iter().map(|a| tape.constant(a.clone())).collect();
        let fwd = self.forward_on(&tape, &params, &vars, mode);
        Ok(pick(&tape, &fwd))
    }

    /// Embeds every layer's activations at the shared resolution.
    pub fn rfe_embed(&self, acts: &ActivationSet, mode: Mode) -> Result<EmbeddedPatterns> {
        self.run_stage(acts.layers(), mode, |tape, f| EmbeddedPatterns {
            layers: f.patterns.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }

    /// Applies the shared scorer to embedded patterns.
    pub fn pdn_score(&self, patterns: &EmbeddedPatterns) -> Result<Vec<Tensor>> {
        let (th, tw) = self.config.shared_resolution;
        if patterns.layers.len() != self.config.layers.len() {
            return Err(Error::Shape("pattern layer count differs from the generator".into()));
        }
        let n = patterns.layers[0].shape()[0];
        for (p, spec) in patterns.layers.iter().zip(&self.config.layers) {
            if p.shape() != [n, spec.channels, th, tw] {
                return Err(Error::Shape(format!("pattern {:?} expected [{n}, {}, {th}, {tw}]", p.shape(), spec.channels)));
            }
        }
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let skip: usize = self.rfe.iter().chain(&self.rpd).map(|b| 2 + 2 * b.norms.len()).sum();
        let flat: Vec<Var> = patterns.layers.iter().map(|p| tape.constant(p.clone().reshape(&[n, p.inner_len()]).unwrap())).collect();
        let mut h = tape.concat_cols(&flat);
        for j in 0..self.pdn.len() {
            h = tape.linear(h, params[skip + 2 * j], Some(params[skip + 2 * j + 1]));
            if j + 1 < self.pdn.len() {
                h = tape.relu(h);
            }
        }
        let out = tape.value(h).clone();
        let width = out.shape()[1];
        let mut start = 0;
        let mut scores = Vec::new();
        for spec in &self.config.layers {
            let len = spec.channels * th * tw;
            let mut data = Vec::with_capacity(n * len);
            for r in 0..n {
                data.extend_from_slice(&out.data()[r * width + start..r * width + start + len]);
            }
            scores.push(Tensor::from_vec(&[n, spec.channels, th, tw], data)?);
            start += len;
        }
        Ok(scores)
    }

    /// Decodes shared-resolution scores back to every layer's native shape.
    pub fn rpd_decode(&self, pdn_scores: &[Tensor], mode: Mode) -> Result<Vec<Tensor>> {
        let (th, tw) = self.config.shared_resolution;
        if pdn_scores.len() != self.config.layers.len() {
            return Err(Error::Shape("score layer count differs from the generator".into()));
        }
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let k = self.config.layers.len();
        let mut offset: usize = self.rfe.iter().map(|b| 2 + 2 * b.norms.len()).sum();
        let mut out = Vec::with_capacity(k);
        let mut sink = Vec::new();
        for (i, s) in pdn_scores.iter().enumerate() {
            let spec = &self.config.layers[i];
            if s.ndim() != 4 || s.shape()[1..] != [spec.channels, th, tw] {
                return Err(Error::Shape(format!("scores {:?} do not match layer {i}", s.shape())));
            }
            let block = &self.rpd[i];
            let count = 2 + 2 * block.norms.len();
            let v = &params[offset..offset + count];
            offset += count;
            let x = tape.constant(s.clone());
            let d = self.recursive(&tape, block, v[0], v[1], &v[2..], x, true, mode, &mut sink);
            let value = tape.value(d).clone();
            if value.shape()[1..] != spec.dims() {
                return Err(Error::Shape(format!("decoder {i} produced {:?}", value.shape())));
            }
            out.push(value);
        }
        Ok(out)
    }

    /// Full pipeline on a batch of images.
    pub fn generate_pathway(&self, model: &TargetModel, images: &Tensor, mode: Mode) -> Result<Generated> {
        self.config.check_model(model.layer_specs())?;
        let (logits, acts) = model.capture_activations(images)?;
        let (patterns, pdn_scores, decoded) = self.run_stage(acts.layers(), mode, |tape, f| {
            let get = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect::<Vec<_>>();
            (get(&f.patterns), get(&f.pdn_scores), get(&f.decoded))
        })?;
        let mask_layers = daq_binarize(&decoded, &self.config, mode)?;
        let n = logits.shape()[0];
        let masks = (0..n)
            .map(|s| PathwayMask::from_layers(mask_layers.iter().map(|t| t.index_outer(s)).collect()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Generated { masks, scores: ImportanceScores { patterns, pdn_scores, decoded }, logits })
    }
}

/// Quantizes decoded scores into mask values: exact levels in evaluation
/// mode, the temperature-relaxed assignment in training mode.
pub fn daq_binarize(decoded: &[Tensor], config: &GeneratorConfig, mode: Mode) -> Result<Vec<Tensor>> {
    let params: DaqParams = config.daq();
    if !(params.lower < params.upper) {
        return Err(Error::Config("quantization bounds need lower < upper".into()));
    }
    if params.bits == 0 {
        return Err(Error::Config("quant_bits must be at least 1".into()));
    }
    if decoded.iter().any(|t| !t.is_finite()) {
        return Err(Error::Numerical("decoded scores contain non-finite values".into()));
    }
    Ok(decoded
        .iter()
        .map(|t| match mode {
            Mode::Eval => t.map(|d| params.hard(d)),
            Mode::Train => t.map(|d| params.soft(d).0),
        })
        .collect())
}

#[cfg(test)]
mod tests;
