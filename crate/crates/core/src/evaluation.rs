//! Faithfulness and class-relevance metrics, the remove-and-predict curve,
//! class pathways and their transfer, and embedding variance statistics.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{threshold_to_mask, ScoreField, ThresholdScope};
use crate::error::{Error, Result};
use crate::instrumentation::{argmax_rows, softmax_rows, PathwayMask, TargetModel};
use crate::tensor::Tensor;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Original and masked predictions of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub original: Vec<f64>,
    pub masked: Vec<f64>,
    pub original_class: usize,
    pub masked_class: usize,
    pub label: Option<usize>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl PredictionRecord {
    pub fn new(original: Vec<f64>, masked: Vec<f64>, label: Option<usize>) -> Result<Self> {
        if original.len() != masked.len() || original.is_empty() {
            return Err(Error::Shape("probability vectors must be non-empty and equally long".into()));
        }
        for (name, p) in [("original", &original), ("masked", &masked)] {
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > 1e-6 || p.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::Data(format!("{name} probabilities sum to {s}")));
            }
        }
        Ok(Self { original_class: argmax(&original), masked_class: argmax(&masked), original, masked, label })
    }

    /// Confidence of the original model in its own prediction.
    pub fn y(&self) -> f64 {
        self.original[self.original_class]
    }

    /// Confidence of the masked model in the original prediction.
    pub fn y_hat(&self) -> f64 {
        self.masked[self.original_class]
    }

    fn agrees(&self) -> bool {
        self.masked_class == self.original_class
    }
}

/// Records from `[n, k]` logits of the plain and the masked model.
pub fn records_from_logits(original: &Tensor, masked: &Tensor, labels: Option<&[usize]>) -> Result<Vec<PredictionRecord>> {
    if original.shape() != masked.shape() || original.ndim() != 2 {
        return Err(Error::Shape("logit batches must share a [n, k] shape".into()));
    }
    let n = original.shape()[0];
    if labels.is_some_and(|l| l.len() != n) {
        return Err(Error::Shape("one label per record is required".into()));
    }
    let (p, q) = (softmax_rows(original), softmax_rows(masked));
    (0..n)
        .map(|i| PredictionRecord::new(p.index_outer(i).into_data(), q.index_outer(i).into_data(), labels.map(|l| l[i])))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyReference {
    /// Agreement with the original model's prediction.
    #[default]
    Model,
    /// Agreement with the ground-truth label.
    Label,
}

fn nonempty(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Data("no prediction records".into()));
    }
    Ok(records.len() as f64)
}

/// Percentage of masked predictions matching the reference.
pub fn accuracy(records: &[PredictionRecord], reference: AccuracyReference) -> Result<f64> {
    let n = nonempty(records)?;
    let mut hits = 0usize;
    for r in records {
        let want = match reference {
            AccuracyReference::Model => r.original_class,
            AccuracyReference::Label => r.label.ok_or_else(|| Error::Data("record has no label".into()))?,
        };
        hits += (r.masked_class == want) as usize;
    }
    Ok(100.0 * hits as f64 / n)
}

/// Mean increase in confidence, over all records, counting only agreeing
/// records whose confidence rose.
pub fn mic(records: &[PredictionRecord]) -> Result<f64> {
    let n = nonempty(records)?;
    let s: f64 = records.iter().filter(|r| r.agrees() && r.y_hat() > r.y()).map(|r| r.y_hat() - r.y()).sum();
    Ok(100.0 * s / n)
}

/// Mean decrease in confidence, gated like [`mic`].
pub fn mdc(records: &[PredictionRecord]) -> Result<f64> {
    let n = nonempty(records)?;
    let s: f64 = records.iter().filter(|r| r.agrees() && r.y_hat() < r.y()).map(|r| r.y() - r.y_hat()).sum();
    Ok(100.0 * s / n)
}

/// Percentage of agreeing records whose confidence rose.
pub fn icr(records: &[PredictionRecord]) -> Result<f64> {
    let n = nonempty(records)?;
    Ok(100.0 * records.iter().filter(|r| r.agrees() && r.y_hat() > r.y()).count() as f64 / n)
}

/// Accuracy (against the model), mIC, mDC and ICr, plus label accuracy
/// when every record has a label.
pub fn faithfulness(records: &[PredictionRecord]) -> Result<BTreeMap<String, f64>> {
    let mut m = BTreeMap::new();
    m.insert("accuracy".to_string(), accuracy(records, AccuracyReference::Model)?);
    m.insert("mic".to_string(), mic(records)?);
    m.insert("mdc".to_string(), mdc(records)?);
    m.insert("icr".to_string(), icr(records)?);
    if records.iter().all(|r| r.label.is_some()) {
        m.insert("label_accuracy".to_string(), accuracy(records, AccuracyReference::Label)?);
    }
    Ok(m)
}

fn iou(a: &[bool], b: &[bool]) -> Option<f64> {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    (union > 0).then(|| inter as f64 / union as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcIou {
    /// Mean over classes of the mean pairwise IOU, in percent.
    pub value: f64,
    /// Per-class mean pairwise IOU, in percent (`None` for classes with
    /// fewer than two samples, which are left out of `value`).
    pub per_class: Vec<Option<f64>>,
    /// Sum over classes and ordered pairs of `IOU / (2 n_c)`, in percent,
    /// with `n_c` the class sample count.
    pub literal: f64,
    /// Pairs whose union was empty (scored 0).
    pub empty_unions: usize,
}

/// Class-wise pathway overlap from bit vectors grouped by class.
pub fn aciou_bits(bits_by_class: &[Vec<Vec<bool>>]) -> Result<AcIou> {
    let mut per_class = Vec::with_capacity(bits_by_class.len());
    let mut literal = 0.0;
    let mut empty_unions = 0;
    for group in bits_by_class {
        if group.iter().any(|b| b.len() != group[0].len()) {
            return Err(Error::Shape("masks of one class differ in size".into()));
        }
        let n = group.len();
        if n < 2 {
            per_class.push(None);
            continue;
        }
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..n {
            for j in i + 1..n {
                let v = iou(&group[i], &group[j]).unwrap_or_else(|| {
                    empty_unions += 1;
                    0.0
                });
                sum += v;
                pairs += 1;
            }
        }
        literal += 2.0 * sum / (2.0 * n as f64);
        per_class.push(Some(100.0 * sum / pairs as f64));
    }
    let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(Error::Data("no class has two or more masks".into()));
    }
    Ok(AcIou { value: scored.iter().sum::<f64>() / scored.len() as f64, per_class, literal: 100.0 * literal, empty_unions })
}

/// acIOU over whole masks, grouped by class.
pub fn aciou(masks_by_class: &[Vec<&PathwayMask>]) -> Result<AcIou> {
    let bits: Vec<Vec<Vec<bool>>> = masks_by_class
        .iter()
        .map(|g| g.iter().map(|m| m.require_finalized().map(|_| m.bits())).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    aciou_bits(&bits)
}

/// acIOU restricted to one layer.
pub fn aciou_layer(masks_by_class: &[Vec<&PathwayMask>], layer: usize) -> Result<AcIou> {
    let bits: Vec<Vec<Vec<bool>>> = masks_by_class
        .iter()
        .map(|g| {
            g.iter()
                .map(|m| {
                    m.require_finalized()?;
                    let t = m.layers().get(layer).ok_or_else(|| Error::Config(format!("mask has no layer {layer}")))?;
                    Ok(t.data().iter().map(|&v| v != 0.0).collect())
                })
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    aciou_bits(&bits)
}

/// Groups items by class id.
pub fn group_by_class<'a, T>(items: &'a [T], classes: &[usize], num_classes: usize) -> Vec<Vec<&'a T>> {
    let mut out = vec![Vec::new(); num_classes];
    for (item, &c) in items.iter().zip(classes) {
        out[c].push(item);
    }
    out
}

/// Percentage of samples still agreeing with the reference after the given
/// pathways are removed (their complement is kept).
pub fn removal_accuracy(
    model: &TargetModel,
    images: &Tensor,
    pathways: &[PathwayMask],
    reference: &[usize],
) -> Result<f64> {
    let removed: Vec<PathwayMask> = pathways.iter().map(PathwayMask::complement).collect::<Result<_>>()?;
    let preds = argmax_rows(&model.masked_forward(images, &removed)?);
    if preds.len() != reference.len() {
        return Err(Error::Shape("one reference class per image is required".into()));
    }
    Ok(100.0 * preds.iter().zip(reference).filter(|(p, r)| p == r).count() as f64 / preds.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoapPoint {
    pub sparsity: f64,
    pub accuracy: f64,
}

/// Remove-and-predict curve: at each grid sparsity `s` every sample's scores
/// are re-thresholded into a pathway of firing sparsity `s`, the pathway is
/// removed, and agreement with `reference` is measured. `s = 1` removes
/// nothing.
pub fn roap(
    model: &TargetModel,
    images: &Tensor,
    scores: &[ScoreField],
    grid: &[f64],
    scope: ThresholdScope,
    reference: &[usize],
) -> Result<Vec<RoapPoint>> {
    let specs = model.layer_specs();
    grid.iter()
        .map(|&s| {
            let pathways: Vec<PathwayMask> = if s == 1.0 {
                vec![PathwayMask::zeros(specs)]
            } else {
                scores.iter().map(|f| threshold_to_mask(f, s, scope)).collect::<Result<_>>()?
            };
            Ok(RoapPoint { sparsity: s, accuracy: removal_accuracy(model, images, &pathways, reference)? })
        })
        .collect()
}

/// Neurons that fire often across a subset of one class's pathways.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPathway {
    pub class: usize,
    pub eps_ss: f64,
    pub eps_cn: f64,
    /// Ids of the samples the statistic was computed on.
    pub sample_ids: Vec<usize>,
    /// Per-layer mean firing rate over the subset.
    #[serde(skip)]
    pub rates: Vec<Tensor>,
    #[serde(skip)]
    pub mask: Option<PathwayMask>,
}

impl ClassPathway {
    pub fn mask(&self) -> &PathwayMask {
        self.mask.as_ref().expect("class pathway holds its mask")
    }

    /// Re-derives the mask from the stored rates.
    pub fn indicator(&self) -> Result<PathwayMask> {
        PathwayMask::from_layers(self.rates.iter().map(|b| b.map(|v| if v > self.eps_cn { 1.0 } else { 0.0 })).collect())
    }
}

/// Number of samples kept out of `n` when excluding a fraction `eps_ss`.
pub fn subset_size(n: usize, eps_ss: f64) -> usize {
    (((1.0 - eps_ss) * n as f64).round() as usize).clamp(1, n.max(1))
}

/// Builds the class pathway from `masks` of one class (`ids` are their
/// sample ids): a seeded random subset of `subset_size` masks is averaged
/// and thresholded strictly at `eps_cn`.
pub fn build_class_pathway(
    class: usize,
    masks: &[&PathwayMask],
    ids: &[usize],
    eps_ss: f64,
    eps_cn: f64,
    seed: u64,
) -> Result<ClassPathway> {
    if !(0.0..1.0).contains(&eps_ss) || !(0.0..1.0).contains(&eps_cn) {
        return Err(Error::Config(format!("eps_ss and eps_cn must be in [0, 1), got {eps_ss} and {eps_cn}")));
    }
    if masks.is_empty() || masks.len() != ids.len() {
        return Err(Error::Data(format!("class {class} needs masks with matching sample ids")));
    }
    let specs = masks[0].specs();
    for m in masks {
        m.require_finalized()?;
        m.check_specs(&specs)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, masks.len(), subset_size(masks.len(), eps_ss)).into_vec();
    picked.sort_unstable();
    let mut rates: Vec<Tensor> = specs.iter().map(|s| Tensor::zeros(&s.dims())).collect();
    for &i in &picked {
        for (acc, layer) in rates.iter_mut().zip(masks[i].layers()) {
            acc.add_assign(layer);
        }
    }
    let k = picked.len() as f64;
    let rates: Vec<Tensor> = rates.into_iter().map(|t| t.map(|v| v / k)).collect();
    let mut out = ClassPathway {
        class,
        eps_ss,
        eps_cn,
        sample_ids: picked.iter().map(|&i| ids[i]).collect(),
        rates,
        mask: None,
    };
    out.mask = Some(out.indicator()?);
    Ok(out)
}

/// Applies each class pathway to every sample of its class.
/// `classes[i]` selects the pathway for image `i`.
pub fn transfer_records(
    model: &TargetModel,
    images: &Tensor,
    classes: &[usize],
    pathways: &[ClassPathway],
    labels: Option<&[usize]>,
) -> Result<Vec<PredictionRecord>> {
    let n = model.check_input(images)?;
    if classes.len() != n {
        return Err(Error::Shape("one class per image is required".into()));
    }
    let by_class: BTreeMap<usize, &ClassPathway> = pathways.iter().map(|p| (p.class, p)).collect();
    let masks: Vec<PathwayMask> = classes
        .iter()
        .map(|c| {
            by_class
                .get(c)
                .map(|p| p.mask().clone())
                .ok_or_else(|| Error::Data(format!("no class pathway for class {c}")))
        })
        .collect::<Result<_>>()?;
    let original = model.forward(images)?;
    let masked = model.masked_forward(images, &masks)?;
    records_from_logits(&original, &masked, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceStats {
    pub within: f64,
    pub between: f64,
}

/// Within-class variance (mean over classes of the mean squared distance to
/// the class centroid) and between-class variance (mean squared distance of
/// the class centroids to the global centroid).
pub fn class_variance_stats(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<VarianceStats> {
    if embeddings.is_empty() || embeddings.len() != labels.len() {
        return Err(Error::Shape("one label per embedding is required".into()));
    }
    let d = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::Shape("embeddings differ in dimension".into()));
    }
    let mut groups: BTreeMap<usize, Vec<&Vec<f64>>> = BTreeMap::new();
    for (e, &l) in embeddings.iter().zip(labels) {
        groups.entry(l).or_default().push(e);
    }
    let centroid = |items: &[&Vec<f64>]| -> Vec<f64> {
        let mut c = vec![0.0; d];
        for e in items {
            for (ci, v) in c.iter_mut().zip(e.iter()) {
                *ci += v;
            }
        }
        c.iter_mut().for_each(|v| *v /= items.len() as f64);
        c
    };
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let all: Vec<&Vec<f64>> = embeddings.iter().collect();
    let global = centroid(&all);
    let mut within = 0.0;
    let mut between = 0.0;
    for items in groups.values() {
        let c = centroid(items);
        within += items.iter().map(|e| sq(e, &c)).sum::<f64>() / items.len() as f64;
        between += sq(&c, &global);
    }
    let k = groups.len() as f64;
    Ok(VarianceStats { within: within / k, between: between / k })
}

/// Relative change `(b - a) / a` in percent.
pub fn variance_delta(a: f64, b: f64) -> f64 {
    (b - a) / a * 100.0
}

/// Gradient-weighted class activation map at the last capture point,
/// computed from masked activations and masked gradients, bilinearly
/// upsampled to the input size and divided by its maximum.
pub fn cam_on_pathway(model: &TargetModel, image: &Tensor, mask: &PathwayMask, class: usize) -> Result<Tensor> {
    let (c, h, w) = model.input_shape();
    let batch = image.clone().reshape(&[1, c, h, w])?;
    let g = model.masked_gradients(&batch, std::slice::from_ref(mask), &[class])?;
    let last = g.masked_acts.len() - 1;
    let acts = &g.masked_acts[last];
    let grads = &g.layer_grads[last];
    let (k, fh, fw) = (acts.shape()[1], acts.shape()[2], acts.shape()[3]);
    let plane = fh * fw;
    let mut cam = vec![0.0; plane];
    for ch in 0..k {
        let gs = &grads.data()[ch * plane..(ch + 1) * plane];
        let weight = gs.iter().sum::<f64>() / plane as f64;
        for (out, a) in cam.iter_mut().zip(&acts.data()[ch * plane..(ch + 1) * plane]) {
            *out += weight * a;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let up = bilinear(&cam, fh, fw, h, w);
    let max = up.iter().cloned().fold(0.0, f64::max);
    let data = if max > 0.0 { up.into_iter().map(|v| v / max).collect() } else { vec![0.0; h * w] };
    Tensor::from_vec(&[h, w], data)
}

/// Half-pixel-centred bilinear resampling of an `h x w` map.
pub fn bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(oh * ow);
    let coord = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, x - lo as f64)
    };
    for y in 0..oh {
        let (y0, y1, ty) = coord(y, oh, h);
        for x in 0..ow {
            let (x0, x1, tx) = coord(x, ow, w);
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bottom = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Metric values with the configuration that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub metrics: BTreeMap<String, f64>,
    pub config: serde_json::Value,
    #[serde(default)]
    pub per_layer: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub records: Vec<PredictionRecord>,
}

impl MetricReport {
    pub fn new(config: serde_json::Value) -> Self {
        Self { schema_version: REPORT_SCHEMA_VERSION, metrics: BTreeMap::new(), config, per_layer: BTreeMap::new(), records: Vec::new() }
    }

    /// Stores the records and the faithfulness metrics computed from them.
    pub fn with_records(mut self, records: Vec<PredictionRecord>) -> Result<Self> {
        self.metrics.extend(faithfulness(&records)?);
        self.records = records;
        Ok(self)
    }
}
