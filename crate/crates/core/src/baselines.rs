//! Competing pathway constructions: attribution scores turned into masks by
//! top-k thresholding, random selection and greedy pruning.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrumentation::{argmax_rows, ActivationSet, LayerSpec, PathwayMask, TargetModel};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMethod {
    Taylor,
    Intgrad,
    Magnitude,
    Random,
    /// Decoded scores of the pathway generator.
    Genpath,
}

impl ScoreMethod {
    pub fn name(&self) -> &'static str {
        match self {
            ScoreMethod::Taylor => "taylor",
            ScoreMethod::Intgrad => "intgrad",
            ScoreMethod::Magnitude => "magnitude",
            ScoreMethod::Random => "random",
            ScoreMethod::Genpath => "genpath",
        }
    }
}

/// Per-layer scores of one sample, `[c, h, w]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreField {
    pub method: ScoreMethod,
    pub layers: Vec<Tensor>,
}

impl ScoreField {
    pub fn new(method: ScoreMethod, layers: Vec<Tensor>) -> Result<Self> {
        if layers.iter().any(|t| !t.is_finite()) {
            return Err(Error::Numerical(format!("{} scores contain non-finite values", method.name())));
        }
        if layers.iter().any(|t| t.ndim() != 3) {
            return Err(Error::Shape("score layers must be [c, h, w]".into()));
        }
        Ok(Self { method, layers })
    }

    /// Splits batched `[n, c, h, w]` layers into per-sample fields.
    pub fn split(method: ScoreMethod, batched: &[Tensor]) -> Result<Vec<Self>> {
        let n = batched[0].shape()[0];
        (0..n).map(|s| Self::new(method, batched.iter().map(|t| t.index_outer(s)).collect())).collect()
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|t| LayerSpec::new(t.shape()[0], t.shape()[1], t.shape()[2])).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdScope {
    #[default]
    PerLayer,
    Global,
}

fn check_classes(model: &TargetModel, classes: &[usize], n: usize) -> Result<()> {
    if classes.len() != n {
        return Err(Error::Shape(format!("{} class indices for {n} inputs", classes.len())));
    }
    if let Some(c) = classes.iter().find(|&&c| c >= model.num_classes()) {
        return Err(Error::Config(format!("class index {c} out of range")));
    }
    Ok(())
}

/// First-order Taylor scores `|a * dy/da|` at every captured activation.
pub fn taylor_importance(model: &TargetModel, images: &Tensor, classes: &[usize]) -> Result<Vec<ScoreField>> {
    let n = model.check_input(images)?;
    check_classes(model, classes, n)?;
    let ones = PathwayMask::ones(model.layer_specs());
    let g = model.masked_gradients(images, &[ones], classes)?;
    let scores: Vec<Tensor> = g
        .masked_acts
        .iter()
        .zip(&g.layer_grads)
        .map(|(a, d)| a.zip_map(d, |a, d| (a * d).abs()))
        .collect::<Result<_>>()?;
    ScoreField::split(ScoreMethod::Taylor, &scores)
}

/// Integrated gradients at each capture point, along the straight line from
/// the baseline input's activations to the input's activations, by the
/// midpoint rule on `steps` points.
///
/// Midpoints avoid evaluating the gradient exactly at the baseline, where
/// every downstream ReLU of a bias-free network sits on its kink.
pub fn intgrad_importance(
    model: &TargetModel,
    images: &Tensor,
    classes: &[usize],
    steps: usize,
    baseline: Option<&Tensor>,
) -> Result<Vec<ScoreField>> {
    let n = model.check_input(images)?;
    check_classes(model, classes, n)?;
    if steps < 2 {
        return Err(Error::Config(format!("integrated gradients need at least 2 steps, got {steps}")));
    }
    let (c, h, w) = model.input_shape();
    let zero = Tensor::zeros(&[1, c, h, w]);
    let baseline = baseline.unwrap_or(&zero);
    if baseline.shape() != [1, c, h, w] {
        return Err(Error::Shape(format!("baseline must be [1, {c}, {h}, {w}], got {:?}", baseline.shape())));
    }
    let (_, acts) = model.capture_activations(images)?;
    let (_, base) = model.capture_activations(baseline)?;

    let mut per_layer = Vec::with_capacity(acts.num_layers());
    for (idx, (a, b)) in acts.layers().iter().zip(base.layers()).enumerate() {
        let b0 = b.index_outer(0);
        let inner = a.inner_len();
        let mut out = Vec::with_capacity(a.len());
        for s in 0..n {
            let x = a.index_outer(s);
            let delta = x.zip_map(&b0, |x, b| x - b)?;
            let path: Vec<Tensor> = (0..steps)
                .map(|k| {
                    let t = (k as f64 + 0.5) / steps as f64;
                    b0.zip_map(&delta, |b, d| b + t * d).unwrap()
                })
                .collect();
            let (_, grads) = model.downstream_gradients(idx, &Tensor::stack(&path)?, &vec![classes[s]; steps])?;
            let mut avg = vec![0.0; inner];
            for k in 0..steps {
                for (acc, g) in avg.iter_mut().zip(&grads.data()[k * inner..(k + 1) * inner]) {
                    *acc += g / steps as f64;
                }
            }
            out.extend(delta.data().iter().zip(&avg).map(|(d, g)| d * g));
        }
        per_layer.push(Tensor::from_vec(a.shape(), out)?);
    }
    ScoreField::split(ScoreMethod::Intgrad, &per_layer)
}

/// Activation values used as scores.
pub fn magnitude_importance(acts: &ActivationSet) -> Result<Vec<ScoreField>> {
    ScoreField::split(ScoreMethod::Magnitude, acts.layers())
}

/// Number of elements kept out of `len` at firing sparsity `s`.
pub fn kept_count(len: usize, s: f64) -> usize {
    // guard against (1 - s) * len landing a hair above an integer
    let raw = (1.0 - s) * len as f64;
    let k = (raw - 1e-9 * len.max(1) as f64).ceil().max(0.0) as usize;
    k.min(len)
}

fn check_sparsity(s: f64) -> Result<()> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::Config(format!("firing sparsity must be in [0, 1), got {s}")));
    }
    Ok(())
}

/// Indices of the `keep` largest values, ties resolved toward lower index.
fn top_indices(values: &[f64], keep: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(keep);
    idx
}

/// Keeps the top `ceil((1 - s) N)` scores per layer or over all layers.
pub fn threshold_to_mask(scores: &ScoreField, s: f64, scope: ThresholdScope) -> Result<PathwayMask> {
    check_sparsity(s)?;
    let mut layers: Vec<Tensor> = scores.layers.iter().map(|t| Tensor::zeros(t.shape())).collect();
    match scope {
        ThresholdScope::PerLayer => {
            for (src, dst) in scores.layers.iter().zip(&mut layers) {
                for i in top_indices(src.data(), kept_count(src.len(), s)) {
                    dst.data_mut()[i] = 1.0;
                }
            }
        }
        ThresholdScope::Global => {
            let flat: Vec<f64> = scores.layers.iter().flat_map(|t| t.data().iter().copied()).collect();
            let offsets: Vec<usize> = scores
                .layers
                .iter()
                .scan(0, |acc, t| {
                    let o = *acc;
                    *acc += t.len();
                    Some(o)
                })
                .collect();
            for i in top_indices(&flat, kept_count(flat.len(), s)) {
                let l = offsets.partition_point(|&o| o <= i) - 1;
                layers[l].data_mut()[i - offsets[l]] = 1.0;
            }
        }
    }
    PathwayMask::from_layers(layers)
}

/// Uniformly random mask with exactly `ceil((1 - s) N)` ones per layer.
pub fn random_mask(specs: &[LayerSpec], s: f64, seed: u64) -> Result<PathwayMask> {
    check_sparsity(s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = specs
        .iter()
        .map(|spec| {
            let mut data = vec![0.0; spec.len()];
            for i in sample(&mut rng, spec.len(), kept_count(spec.len(), s)) {
                data[i] = 1.0;
            }
            Tensor::from_vec(&spec.dims(), data).unwrap()
        })
        .collect();
    PathwayMask::from_layers(layers)
}

/// Random masks whose per-layer kept counts copy those of `like`.
pub fn random_like(like: &PathwayMask, seed: u64) -> Result<PathwayMask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = like
        .layers()
        .iter()
        .map(|t| {
            let keep = t.data().iter().filter(|&&v| v != 0.0).count();
            let mut data = vec![0.0; t.len()];
            for i in sample(&mut rng, t.len(), keep) {
                data[i] = 1.0;
            }
            Tensor::from_vec(t.shape(), data).unwrap()
        })
        .collect();
    PathwayMask::from_layers(layers)
}

#[derive(Clone, Debug)]
pub struct GreedyResult {
    pub mask: PathwayMask,
    pub sparsity: f64,
    /// The input was misclassified to begin with; the mask is all ones.
    pub misclassified: bool,
}

/// Zeroes elements in ascending score order (over all layers, ties by lower
/// flat index), `chunk` at a time, keeping the last mask under which the
/// prediction stays the original class.
///
/// `label` is the reference class; `None` uses the model's own prediction.
pub fn greedy_prune(
    model: &TargetModel,
    image: &Tensor,
    scores: &ScoreField,
    label: Option<usize>,
    chunk: Option<usize>,
) -> Result<GreedyResult> {
    let specs = model.layer_specs().to_vec();
    if scores.specs() != specs {
        return Err(Error::Shape("score field does not match the model's capture points".into()));
    }
    let (c, h, w) = model.input_shape();
    let single = image.clone().reshape(&[1, c, h, w])?;
    let predicted = argmax_rows(&model.forward(&single)?)[0];
    let ones = PathwayMask::ones(&specs);
    if label.is_some_and(|l| l != predicted) {
        return Ok(GreedyResult { mask: ones, sparsity: 0.0, misclassified: true });
    }
    let flat: Vec<f64> = scores.layers.iter().flat_map(|t| t.data().iter().copied()).collect();
    let total = flat.len();
    let chunk = chunk.unwrap_or_else(|| (total / 100).max(1)).max(1);
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| flat[a].total_cmp(&flat[b]).then(a.cmp(&b)));

    let prefix_mask = |removed: usize| -> PathwayMask {
        let mut bits = vec![true; total];
        for &i in &order[..removed] {
            bits[i] = false;
        }
        PathwayMask::from_bits(&specs, &bits).unwrap()
    };
    let steps: Vec<usize> = (1..=total.div_ceil(chunk)).map(|k| (k * chunk).min(total)).collect();
    let mut best = 0;
    // evaluate candidate prefixes in batches of the repeated image
    'outer: for group in steps.chunks(32) {
        let masks: Vec<PathwayMask> = group.iter().map(|&r| prefix_mask(r)).collect();
        let batch = Tensor::stack(&vec![image.clone().reshape(&[c, h, w])?; masks.len()])?;
        let preds = argmax_rows(&model.masked_forward(&batch, &masks)?);
        for (&r, p) in group.iter().zip(preds) {
            if p != predicted {
                break 'outer;
            }
            best = r;
        }
    }
    let mask = prefix_mask(best);
    Ok(GreedyResult { sparsity: mask.firing_sparsity(), mask, misclassified: false })
}
