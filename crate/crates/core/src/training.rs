//! Distillation training of the pathway generator against a frozen model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::generator::{Generator, Mode};
use crate::instrumentation::{softmax_rows, PathwayMask, TargetModel};
use crate::tensor::Tensor;

/// Natural log of the smallest probability used inside the distillation loss.
pub const LOG_FLOOR: f64 = -27.631_021_115_928_547; // ln(1e-12)

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; 0 disables periodic saves.
    pub checkpoint_every: usize,
    /// Free-form name of the training data, echoed into manifests.
    #[serde(default)]
    pub dataset: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 0.05, learning_rate: 1e-4, epochs: 10, batch_size: 32, seed: 0, checkpoint_every: 1, dataset: None }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Cross-entropy of the masked prediction against the original prediction,
/// `-sum_c p_orig(c) ln p_masked(c)`, with the log clamped at `ln(1e-12)`.
pub fn kd_loss(masked_logits: &[f64], original_logits: &[f64]) -> Result<f64> {
    if masked_logits.len() != original_logits.len() || masked_logits.is_empty() {
        return Err(Error::Shape(format!(
            "logit vectors have {} and {} entries",
            masked_logits.len(),
            original_logits.len()
        )));
    }
    let target: Vec<f64> = log_softmax(original_logits).into_iter().map(f64::exp).collect();
    Ok(kd_from_probs(&log_softmax(masked_logits), &target))
}

fn kd_from_probs(log_masked: &[f64], target: &[f64]) -> f64 {
    -target.iter().zip(log_masked).map(|(p, lq)| p * lq.max(LOG_FLOOR)).sum::<f64>()
}

/// Distillation loss between two probability vectors given directly.
pub fn kd_loss_probs(masked: &[f64], original: &[f64]) -> Result<f64> {
    if masked.len() != original.len() {
        return Err(Error::Shape("probability vectors differ in length".into()));
    }
    let log_masked: Vec<f64> = masked.iter().map(|q| if *q > 0.0 { q.ln() } else { f64::NEG_INFINITY }).collect();
    Ok(kd_from_probs(&log_masked, original))
}

/// Mean distillation loss over a batch of `[n, k]` logits.
pub fn kd_loss_batch(masked_logits: &Tensor, original_logits: &Tensor) -> Result<f64> {
    if masked_logits.shape() != original_logits.shape() || masked_logits.ndim() != 2 {
        return Err(Error::Shape("batch logits must share a [n, k] shape".into()));
    }
    let k = masked_logits.shape()[1];
    let rows = masked_logits.shape()[0];
    let mut total = 0.0;
    for (m, o) in masked_logits.data().chunks(k).zip(original_logits.data().chunks(k)) {
        total += kd_loss(m, o)?;
    }
    Ok(total / rows as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityTerms {
    /// Squared l2 norm of the mask, the optimized surrogate.
    pub l2_squared: f64,
    /// Number of nonzero entries, for diagnostics.
    pub l0: usize,
}

pub fn sparsity_loss(mask: &PathwayMask) -> SparsityTerms {
    let l2_squared = mask.layers().iter().flat_map(|t| t.data()).map(|v| v * v).sum();
    SparsityTerms { l2_squared, l0: mask.count_ones() }
}

pub fn total_loss(kd: f64, sparsity: f64, config: &TrainConfig) -> f64 {
    config.alpha * kd + config.beta * sparsity
}

/// Adam with the usual defaults (betas 0.9/0.999, eps 1e-8).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, sizes: &[usize]) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= self.learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

/// One row of the loss curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub kd: f64,
    pub sparsity: f64,
    pub total: f64,
    /// Mean fraction of relaxed mask entries below one half.
    pub firing_sparsity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: usize,
    pub total: f64,
}

pub struct TrainState {
    pub generator: Generator,
    pub optimizer: Adam,
    pub epoch: usize,
    pub history: Vec<LossRecord>,
    pub best: Option<BestRecord>,
}

impl TrainState {
    pub fn new(generator: Generator, config: &TrainConfig) -> Self {
        let sizes: Vec<usize> = generator.params().iter().map(|t| t.len()).collect();
        Self { optimizer: Adam::new(config.learning_rate, &sizes), generator, epoch: 0, history: Vec::new(), best: None }
    }

    /// Mean total loss of each completed epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        epoch_mean(&self.history, |r| r.total)
    }

    pub fn epoch_sparsity(&self) -> Vec<f64> {
        epoch_mean(&self.history, |r| r.firing_sparsity)
    }
}

fn epoch_mean(history: &[LossRecord], f: impl Fn(&LossRecord) -> f64) -> Vec<f64> {
    let mut out: Vec<(f64, usize)> = Vec::new();
    for r in history {
        if out.len() <= r.epoch {
            out.resize(r.epoch + 1, (0.0, 0));
        }
        out[r.epoch].0 += f(r);
        out[r.epoch].1 += 1;
    }
    out.into_iter().map(|(s, n)| if n == 0 { 0.0 } else { s / n as f64 }).collect()
}

/// Loss value and parameter gradients of one batch.
pub struct BatchLoss {
    pub kd: f64,
    pub sparsity: f64,
    pub total: f64,
    pub firing_sparsity: f64,
    pub grads: Vec<Tensor>,
    pub(crate) tape: Tape,
    pub(crate) norm_nodes: Vec<Var>,
}

/// Forward and backward pass of the training objective on one batch.
///
/// The sparsity term is the squared l2 norm of each sample's relaxed mask,
/// averaged over the batch, like the distillation term.
pub fn batch_loss(model: &TargetModel, generator: &Generator, images: &Tensor, config: &TrainConfig) -> Result<BatchLoss> {
    let n = model.check_input(images)?;
    let (original, acts) = model.capture_activations(images)?;
    let target = softmax_rows(&original);

    let tape = Tape::new();
    let params = generator.bind(&tape, true);
    let act_vars: Vec<Var> = acts.layers().iter().map(|a| tape.constant(a.clone())).collect();
    let fwd = generator.forward_on(&tape, &params, &act_vars, Mode::Train);

    let bound = model.bind(&tape, false);
    let x = tape.constant(images.clone());
    let logits = model.masked_forward_on(&tape, &bound, x, &fwd.relaxed);
    let kd = tape.soft_cross_entropy(logits, &target, LOG_FLOOR);

    let mut sparsity = None;
    let mut below = 0usize;
    let mut count = 0usize;
    for &r in &fwd.relaxed {
        let term = tape.sum_squares(r, 1.0 / n as f64);
        sparsity = Some(match sparsity {
            None => term,
            Some(s) => tape.add(s, term),
        });
        let v = tape.value(r);
        below += v.data().iter().filter(|&&p| p < 0.5).count();
        count += v.len();
    }
    let sparsity = sparsity.expect("generator has at least one layer");
    let total = tape.add(tape.scale(kd, config.alpha), tape.scale(sparsity, config.beta));
    let mut grads = tape.backward(total);
    let grads = params
        .iter()
        .map(|&p| grads.take(p).unwrap_or_else(|| Tensor::zeros(&tape.shape(p))))
        .collect();
    let kd_v = tape.value(kd).item();
    let sp_v = tape.value(sparsity).item();
    let total_v = tape.value(total).item();
    let norm_nodes = fwd.norm_nodes;
    Ok(BatchLoss {
        kd: kd_v,
        sparsity: sp_v,
        total: total_v,
        firing_sparsity: below as f64 / count as f64,
        grads,
        tape,
        norm_nodes,
    })
}

/// Trains `state.generator` on `images` (`[n, c, h, w]`).
///
/// `on_epoch` runs after every epoch with the updated state and reports
/// whether a checkpoint is due; it may persist the state.
pub fn train(
    model: &TargetModel,
    state: &mut TrainState,
    images: &Tensor,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&TrainState, bool) -> Result<()>,
) -> Result<()> {
    config.validate()?;
    state.generator.config().check_model(model.layer_specs())?;
    let total = model.check_input(images)?;
    let checksum = model.checksum();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..total).collect();
    let mut step = state.history.last().map_or(0, |r| r.step + 1);

    for _ in 0..config.epochs {
        let epoch = state.epoch;
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = Tensor::stack(&chunk.iter().map(|&i| images.index_outer(i)).collect::<Vec<_>>())?;
            let loss = batch_loss(model, &state.generator, &batch, config)?;
            if !loss.total.is_finite() || loss.grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite loss or gradient at epoch {epoch}, batch {b} (kd {}, sparsity {})",
                    loss.kd, loss.sparsity
                )));
            }
            state.generator.update_running_stats(&loss.tape, &loss.norm_nodes);
            state.optimizer.update(state.generator.params_mut(), &loss.grads);
            state.history.push(LossRecord {
                epoch,
                step,
                kd: loss.kd,
                sparsity: loss.sparsity,
                total: loss.total,
                firing_sparsity: loss.firing_sparsity,
            });
            epoch_total += loss.total;
            batches += 1;
            step += 1;
        }
        if model.checksum() != checksum {
            return Err(Error::Numerical("target model parameters changed during training".into()));
        }
        let mean = epoch_total / batches.max(1) as f64;
        if state.best.is_none_or(|b| mean < b.total) {
            state.best = Some(BestRecord { epoch, total: mean });
        }
        state.epoch += 1;
        let due = config.checkpoint_every > 0 && state.epoch.is_multiple_of(config.checkpoint_every);
        on_epoch(state, due)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;
    use crate::instrumentation::Architecture;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn kd_matches_hand_value() {
        let got = kd_loss_probs(&[0.6, 0.4], &[0.7, 0.3]).unwrap();
        let want = -(0.7 * 0.6f64.ln() + 0.3 * 0.4f64.ln());
        assert_abs_diff_eq!(got, want, epsilon = 1e-15);
        // the same distributions expressed as logits
        let got = kd_loss(&[0.6f64.ln(), 0.4f64.ln()], &[0.7f64.ln(), 0.3f64.ln()]).unwrap();
        assert_abs_diff_eq!(got, want, epsilon = 1e-12);
    }

    #[test]
    fn kd_is_clamped() {
        let v = kd_loss_probs(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(v, -LOG_FLOOR, epsilon = 1e-12);
        let v = kd_loss(&[1000.0, -1000.0], &[-1000.0, 1000.0]).unwrap();
        assert!(v <= -(1e-12f64).ln() + 1e-9);
        assert!(kd_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn sparsity_and_total() {
        let t = Tensor::from_vec(&[1, 1, 3], vec![0.5, 1.0, 0.0]).unwrap();
        let m = PathwayMask::from_layers(vec![t]).unwrap();
        assert_eq!(sparsity_loss(&m), SparsityTerms { l2_squared: 1.25, l0: 2 });
        let specs = [crate::instrumentation::LayerSpec::new(2, 3, 3)];
        assert_eq!(sparsity_loss(&PathwayMask::ones(&specs)).l2_squared, 18.0);
        assert_eq!(sparsity_loss(&PathwayMask::zeros(&specs)).l2_squared, 0.0);
        let cfg = TrainConfig { alpha: 1.0, beta: 0.005, ..TrainConfig::default() };
        assert_abs_diff_eq!(total_loss(2.0, 10.0, &cfg), 2.05, epsilon = 1e-15);
        let cfg = TrainConfig { beta: 0.0, ..cfg };
        assert_eq!(total_loss(1.234, 99.0, &cfg), 1.234);
    }

    proptest! {
        #[test]
        fn gibbs_inequality(a in prop::collection::vec(-5.0f64..5.0, 2..8), seed in 0u64..1000) {
            let k = a.len();
            let b: Vec<f64> = (0..k).map(|i| ((seed as f64 + 1.0) * (i as f64 + 0.3)).sin() * 4.0).collect();
            let p: Vec<f64> = log_softmax(&a).into_iter().map(f64::exp).collect();
            let entropy = -p.iter().map(|x| x * x.ln()).sum::<f64>();
            let cross = kd_loss(&b, &a).unwrap();
            prop_assert!(cross >= entropy - 1e-9);
            let same = kd_loss(&a, &a).unwrap();
            prop_assert!((same - entropy).abs() <= 1e-9);
        }
    }

    fn toy_setup(seed: u64) -> (TargetModel, Generator, Tensor) {
        let model = Architecture::Toy3.build((3, 8, 8), 2, seed).unwrap();
        let mut cfg = GeneratorConfig::for_layers(model.layer_specs()).unwrap();
        cfg.pdn_hidden = 16;
        cfg.tau = 0.5;
        cfg.score_init = 0.5;
        cfg.seed = seed;
        let g = Generator::new(cfg).unwrap();
        let n = 4 * 3 * 8 * 8;
        let images = Tensor::from_vec(&[4, 3, 8, 8], (0..n).map(|i| ((i * 37 % 101) as f64) / 50.0 - 1.0).collect()).unwrap();
        (model, g, images)
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let (model, g, images) = toy_setup(5);
        let cfg = TrainConfig { beta: 0.01, ..TrainConfig::default() };
        let analytic = batch_loss(&model, &g, &images, &cfg).unwrap();
        let h = 1e-6;
        let mut checked = 0;
        for p in 0..g.params().len() {
            let len = g.params()[p].len();
            for e in [0, len / 3, len - 1] {
                let a = analytic.grads[p].data()[e];
                let mut plus = g.clone();
                plus.params_mut()[p].data_mut()[e] += h;
                let mut minus = g.clone();
                minus.params_mut()[p].data_mut()[e] -= h;
                let lp = batch_loss(&model, &plus, &images, &cfg).unwrap().total;
                let lm = batch_loss(&model, &minus, &images, &cfg).unwrap().total;
                let numeric = (lp - lm) / (2.0 * h);
                let scale = numeric.abs().max(a.abs());
                if scale < 1e-7 {
                    continue;
                }
                assert!((numeric - a).abs() <= 1e-3 * scale, "param {p}[{e}]: analytic {a}, numeric {numeric}");
                checked += 1;
            }
        }
        assert!(checked > 10, "only {checked} entries had signal");
    }

    #[test]
    fn zero_epochs_leave_parameters_untouched() {
        let (model, g, images) = toy_setup(1);
        let before = g.clone();
        let mut state = TrainState::new(g, &TrainConfig::default());
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let mut calls = 0;
        train(&model, &mut state, &images, &cfg, &mut |_, _| {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, 0);
        assert_eq!(state.generator, before);
        assert!(state.history.is_empty());
    }

    #[test]
    fn training_is_reproducible_and_leaves_model_intact() {
        let (model, g, images) = toy_setup(2);
        let sum = model.checksum();
        let cfg = TrainConfig { epochs: 2, batch_size: 2, learning_rate: 1e-3, beta: 0.01, ..TrainConfig::default() };
        let run = || {
            let mut state = TrainState::new(g.clone(), &cfg);
            let mut due = Vec::new();
            train(&model, &mut state, &images, &cfg, &mut |_, d| {
                due.push(d);
                Ok(())
            })
            .unwrap();
            (state, due)
        };
        let (a, due) = run();
        let (b, _) = run();
        assert_eq!(a.generator, b.generator);
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 4);
        assert_eq!(due, vec![true, true]);
        assert_ne!(a.generator, g);
        assert_eq!(model.checksum(), sum);
        assert_eq!(a.epoch_means().len(), 2);
    }

    #[test]
    fn sparsity_gradient_points_toward_zero() {
        // with alpha = 0 only the sparsity term remains; its gradient with
        // respect to the relaxed mask is 2p/n, never negative
        let tape = Tape::new();
        let p = tape.param(Tensor::from_vec(&[2, 3], vec![0.0, 0.2, 0.5, 0.9, 1.0, 0.7]).unwrap());
        let s = tape.sum_squares(p, 0.5);
        let g = tape.backward(s);
        let g = g.get(p).unwrap();
        for (gi, pi) in g.data().iter().zip(tape.value(p).data()) {
            assert_abs_diff_eq!(*gi, pi, epsilon = 1e-15);
            assert!(*gi >= 0.0);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            TrainConfig { alpha: 0.0, ..TrainConfig::default() },
            TrainConfig { beta: -1.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }
}
