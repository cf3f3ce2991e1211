//! Desk-scale fixtures: fitting a small classifier so there is a trained
//! target to explain. Explanations themselves never modify the target.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::instrumentation::{argmax_rows, Architecture, TargetModel};
use crate::tensor::Tensor;
use crate::training::{Adam, LOG_FLOOR};

#[derive(Clone, Debug)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { epochs: 4, batch_size: 32, learning_rate: 3e-3, seed: 0 }
    }
}

/// Fits every parameter of `model` on `data` with label cross-entropy.
/// Returns the per-epoch mean loss.
pub fn fit_classifier(model: &mut TargetModel, data: &Dataset, cfg: &FitConfig) -> Result<Vec<f64>> {
    model.check_input(&data.images)?;
    if data.labels.iter().any(|&l| l >= model.num_classes()) {
        return Err(Error::Data("label outside the model's classes".into()));
    }
    let sizes: Vec<usize> = model.named_tensors().iter().map(|(_, t)| t.len()).collect();
    let mut adam = Adam::new(cfg.learning_rate, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let k = model.num_classes();
    let mut curve = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Tensor::stack(&chunk.iter().map(|&i| data.images.index_outer(i)).collect::<Vec<_>>())?;
            let mut onehot = Tensor::zeros(&[chunk.len(), k]);
            for (r, &i) in chunk.iter().enumerate() {
                onehot.data_mut()[r * k + data.labels[i]] = 1.0;
            }
            let tape = Tape::new();
            let (bound, params) = model.bind_trainable(&tape);
            let x = tape.constant(batch);
            let logits = model.run(&tape, &bound, x, 0, 0, &mut |_, a| a);
            let loss = tape.soft_cross_entropy(logits, &onehot, LOG_FLOOR);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numerical("classifier loss diverged".into()));
            }
            let mut grads = tape.backward(loss);
            let grads: Vec<Tensor> = params
                .iter()
                .map(|&p| grads.take(p).unwrap_or_else(|| Tensor::zeros(&tape.shape(p))))
                .collect();
            adam.update(model.tensors_mut(), &grads);
            total += value;
            batches += 1;
        }
        curve.push(total / batches.max(1) as f64);
    }
    Ok(curve)
}

/// Fraction of samples whose prediction equals the label.
pub fn label_accuracy(model: &TargetModel, data: &Dataset) -> Result<f64> {
    let logits = model.forward(&data.images)?;
    let pred = argmax_rows(&logits);
    Ok(pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count() as f64 / data.len() as f64)
}

/// A toy3 classifier fitted on the synthetic two-blob data.
pub fn toy_classifier(train: &Dataset, seed: u64) -> Result<TargetModel> {
    let mut model = Architecture::Toy3.build(train.image_shape(), train.num_classes, seed)?;
    fit_classifier(&mut model, train, &FitConfig { seed, ..FitConfig::default() })?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetSource, Normalization};

    #[test]
    fn toy_classifier_learns_blobs() {
        let norm = Normalization::centered();
        let train = DatasetSource::Blobs { count: 256, seed: 1 }.load(&norm).unwrap();
        let test = DatasetSource::Blobs { count: 200, seed: 2 }.load(&norm).unwrap();
        let model = toy_classifier(&train, 0).unwrap();
        let acc = label_accuracy(&model, &test).unwrap();
        assert!(acc >= 0.97, "accuracy {acc}");
    }
}
