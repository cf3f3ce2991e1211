//! Command implementations. Each writes its outputs plus a manifest into
//! the configured output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use neuropath::baselines::{
    greedy_prune, intgrad_importance, magnitude_importance, random_mask, taylor_importance, threshold_to_mask,
    ScoreField, ScoreMethod,
};
use neuropath::data::{Dataset, DatasetSource, Normalization};
use neuropath::evaluation::{
    accuracy, aciou, aciou_layer, build_class_pathway, cam_on_pathway, class_variance_stats, group_by_class,
    records_from_logits, removal_accuracy, roap, transfer_records, variance_delta, AccuracyReference, ClassPathway,
    MetricReport,
};
use neuropath::fixtures::{fit_classifier, label_accuracy, FitConfig};
use neuropath::generator::{Generator, GeneratorConfig, Mode};
use neuropath::instrumentation::{argmax_rows, Architecture, PathwayMask, TargetModel};
use neuropath::io::{load_generator, load_model, loss_curve_csv, read_json, read_mask, save_generator, save_model, write_json, write_mask, write_text, GeneratorMeta};
use neuropath::training::{train, TrainState};
use neuropath::viz;
use neuropath::{Error, Result, Tensor};
use serde::Serialize;

use crate::config::*;

/// Samples processed per forward pass.
const CHUNK: usize = 64;

/// Runs `config`, writing outputs and `manifest.json` into `config.out`.
pub fn run(config: &RunConfig) -> Result<Manifest> {
    fs::create_dir_all(&config.out).map_err(|e| Error::io(&config.out, e))?;
    let mut ctx = Context { out: config.out.clone(), seed: config.seed, outputs: Vec::new(), metrics: BTreeMap::new(), normalization: None };
    match &config.command {
        CommandConfig::Fixture(c) => fixture(&mut ctx, c)?,
        CommandConfig::Train(c) => train_cmd(&mut ctx, c)?,
        CommandConfig::Explain(c) => explain(&mut ctx, c)?,
        CommandConfig::Eval(c) => eval(&mut ctx, c)?,
        CommandConfig::Transfer(c) => transfer(&mut ctx, c)?,
        CommandConfig::Viz(c) => viz_cmd(&mut ctx, c)?,
    }
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        run: config.clone(),
        normalization: ctx.normalization,
        outputs: ctx.outputs,
        metrics: ctx.metrics,
    };
    write_json(&config.out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Re-runs the command recorded in a manifest, optionally into another
/// directory.
pub fn rerun(manifest: &Path, out: Option<PathBuf>) -> Result<Manifest> {
    let previous: Manifest = read_json(manifest)?;
    if previous.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::format(manifest, format!("unsupported manifest schema {}", previous.schema_version)));
    }
    let mut config = previous.run;
    if let Some(out) = out {
        config.out = out;
    }
    run(&config)
}

struct Context {
    out: PathBuf,
    seed: u64,
    outputs: Vec<String>,
    metrics: BTreeMap<String, f64>,
    normalization: Option<Normalization>,
}

impl Context {
    fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.out.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.outputs.push(rel.to_string());
        Ok(p)
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let p = self.path(rel)?;
        write_json(&p, value)
    }

    fn text(&mut self, rel: &str, text: &str) -> Result<()> {
        let p = self.path(rel)?;
        write_text(&p, text)
    }

    fn png(&mut self, rel: &str, img: &image::RgbImage) -> Result<()> {
        let p = self.path(rel)?;
        viz::save_png(img, &p)
    }

    fn load_data(&mut self, source: &DatasetSource, norm: Option<&Normalization>) -> Result<Dataset> {
        let norm = norm.cloned().unwrap_or_else(|| source.default_normalization());
        let data = source.load(&norm)?;
        self.normalization = Some(norm);
        Ok(data)
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Config(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn open_model(path: &Path) -> Result<TargetModel> {
    require_file(path, "model checkpoint")?;
    load_model(path)
}

fn open_generator(path: &Path, model: &TargetModel) -> Result<Generator> {
    require_file(path, "generator checkpoint")?;
    let (g, meta) = load_generator(path)?;
    g.config().check_model(model.layer_specs())?;
    if meta.model_checksum.is_some_and(|c| c != model.checksum()) {
        eprintln!("warning: generator {} was trained against a different model", path.display());
    }
    Ok(g)
}

fn open_index(dir: &Path) -> Result<MaskIndex> {
    let path = dir.join(INDEX_FILE);
    require_file(&path, "mask index")?;
    read_json(&path)
}

fn read_masks(dir: &Path, index: &MaskIndex) -> Result<Vec<PathwayMask>> {
    index.entries.iter().map(|e| read_mask(&dir.join(&e.file))).collect()
}

fn check_model_matches(index: &MaskIndex, model: &TargetModel) -> Result<()> {
    if index.model_checksum.is_some_and(|c| c != model.checksum()) {
        return Err(Error::Data("masks were produced for a different model checkpoint".into()));
    }
    Ok(())
}

fn subset_images(data: &Dataset, ids: &[usize]) -> Result<Tensor> {
    if let Some(&bad) = ids.iter().find(|&&i| i >= data.len()) {
        return Err(Error::Data(format!("sample id {bad} outside a dataset of {} samples", data.len())));
    }
    Tensor::stack(&ids.iter().map(|&i| data.images.index_outer(i)).collect::<Vec<_>>())
}

/// Runs `f` on consecutive chunks of `images` and concatenates the results.
fn chunked<T>(images: &Tensor, mut f: impl FnMut(usize, &Tensor) -> Result<Vec<T>>) -> Result<Vec<T>> {
    let n = images.shape()[0];
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let batch = Tensor::stack(&(start..end).map(|i| images.index_outer(i)).collect::<Vec<_>>())?;
        out.extend(f(start, &batch)?);
    }
    Ok(out)
}

fn logits_rows(t: &Tensor) -> Vec<Tensor> {
    (0..t.shape()[0]).map(|i| t.index_outer(i)).collect()
}

fn forward(model: &TargetModel, images: &Tensor) -> Result<Tensor> {
    Tensor::stack(&chunked(images, |_, b| Ok(logits_rows(&model.forward(b)?)))?)
}

fn masked_forward(model: &TargetModel, images: &Tensor, masks: &[PathwayMask]) -> Result<Tensor> {
    Tensor::stack(&chunked(images, |start, b| {
        let n = b.shape()[0];
        Ok(logits_rows(&model.masked_forward(b, &masks[start..start + n])?))
    })?)
}

fn agreement(a: &[usize], b: &[usize]) -> f64 {
    100.0 * a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len().max(1) as f64
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

fn fixture(ctx: &mut Context, c: &FixtureConfig) -> Result<()> {
    let data = ctx.load_data(&c.dataset, None)?;
    let arch = Architecture::from_name(&c.arch)?;
    let mut model = arch.build(data.image_shape(), data.num_classes, ctx.seed)?;
    let fit = FitConfig { epochs: c.epochs, batch_size: c.batch_size, learning_rate: c.learning_rate, seed: ctx.seed };
    let curve = fit_classifier(&mut model, &data, &fit)?;
    let p = ctx.path("model.ck")?;
    save_model(&p, &model)?;
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in curve.iter().enumerate() {
        csv.push_str(&format!("{e},{l}\n"));
    }
    ctx.text("fit_curve.csv", &csv)?;
    ctx.metrics.insert("train_accuracy".into(), 100.0 * label_accuracy(&model, &data)?);
    if let Some(test) = &c.test {
        let norm = data.normalization.clone();
        let test = test.load(&norm)?;
        ctx.metrics.insert("test_accuracy".into(), 100.0 * label_accuracy(&model, &test)?);
    }
    ctx.metrics.insert("model_checksum".into(), model.checksum() as f64);
    Ok(())
}

fn train_cmd(ctx: &mut Context, c: &TrainCommand) -> Result<()> {
    let model = open_model(&c.model)?;
    let data = ctx.load_data(&c.dataset, None)?;
    let mut gcfg = GeneratorConfig::for_layers(model.layer_specs())?;
    let o = &c.generator;
    gcfg.tau = o.tau.unwrap_or(gcfg.tau);
    gcfg.pdn_depth = o.pdn_depth.unwrap_or(gcfg.pdn_depth);
    gcfg.pdn_hidden = o.pdn_hidden.unwrap_or(gcfg.pdn_hidden);
    gcfg.quant_bits = o.quant_bits.unwrap_or(gcfg.quant_bits);
    gcfg.seed = ctx.seed;
    let mut tcfg = c.train.clone();
    tcfg.seed = ctx.seed;
    tcfg.validate()?;
    let generator = Generator::new(gcfg)?;
    let mut state = TrainState::new(generator, &tcfg);
    let checksum = model.checksum();
    let meta = |s: &TrainState| GeneratorMeta {
        kind: "generator".into(),
        config: s.generator.config().clone(),
        epoch: s.epoch,
        train: Some(tcfg.clone()),
        model_checksum: Some(checksum),
    };
    let mut saved = Vec::new();
    let out = ctx.out.clone();
    let ck_dir = out.join("checkpoints");
    fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
    train(&model, &mut state, &data.images, &tcfg, &mut |s, due| {
        let h = s.history.last().expect("an epoch ran");
        eprintln!("epoch {} kd {:.5} sparsity {:.2} total {:.5} firing {:.3}", s.epoch, h.kd, h.sparsity, h.total, h.firing_sparsity);
        if due {
            let rel = format!("checkpoints/epoch_{:03}.ck", s.epoch);
            save_generator(&out.join(&rel), &s.generator, meta(s))?;
            saved.push(rel);
        }
        Ok(())
    })?;
    ctx.outputs.extend(saved);
    let p = ctx.path("generator.ck")?;
    save_generator(&p, &state.generator, meta(&state))?;
    ctx.text("loss_curve.csv", &loss_curve_csv(&state.history))?;
    ctx.metrics.insert("epochs".into(), state.epoch as f64);
    for (e, m) in state.epoch_means().iter().enumerate() {
        ctx.metrics.insert(format!("epoch_{e:03}_total"), *m);
    }
    for (e, s) in state.epoch_sparsity().iter().enumerate() {
        ctx.metrics.insert(format!("epoch_{e:03}_firing_sparsity"), *s);
    }
    let params: f64 = state.generator.params().iter().map(|t| t.sum()).sum();
    ctx.metrics.insert("parameter_sum".into(), params);
    Ok(())
}

/// Scores of every image under a score-based method.
fn score_fields(
    model: &TargetModel,
    generator: Option<&Generator>,
    method: ScoreMethod,
    images: &Tensor,
    steps: usize,
) -> Result<Vec<ScoreField>> {
    chunked(images, |_, b| {
        let classes = argmax_rows(&model.forward(b)?);
        match method {
            ScoreMethod::Taylor => taylor_importance(model, b, &classes),
            ScoreMethod::Intgrad => intgrad_importance(model, b, &classes, steps, None),
            ScoreMethod::Magnitude => magnitude_importance(&model.capture_activations(b)?.1),
            ScoreMethod::Genpath => {
                let g = generator.ok_or_else(|| Error::Config("genpath scores need a generator checkpoint".into()))?;
                ScoreField::split(ScoreMethod::Genpath, &g.generate_pathway(model, b, Mode::Eval)?.scores.decoded)
            }
            ScoreMethod::Random => Err(Error::Config("random masks have no score field".into())),
        }
    })
}

fn explain(ctx: &mut Context, c: &ExplainConfig) -> Result<()> {
    let model = open_model(&c.model)?;
    let data = ctx.load_data(&c.dataset, None)?;
    model.check_input(&data.images)?;
    let n = c.limit.map_or(data.len(), |l| l.min(data.len()));
    let ids: Vec<usize> = (0..n).collect();
    let images = subset_images(&data, &ids)?;
    let specs = model.layer_specs().to_vec();
    let generator = match (&c.generator, c.method) {
        (Some(p), _) => Some(open_generator(p, &model)?),
        (None, Method::Genpath) => return Err(Error::Config("--method genpath needs --generator".into())),
        (None, _) => None,
    };
    let score_method = match c.method {
        Method::Genpath => Some(ScoreMethod::Genpath),
        Method::Random => None,
        Method::Taylor => Some(ScoreMethod::Taylor),
        Method::Intgrad => Some(ScoreMethod::Intgrad),
        Method::Magnitude => Some(ScoreMethod::Magnitude),
        Method::Greedy => Some(c.greedy_scores),
    };
    let masks: Vec<PathwayMask> = match c.method {
        Method::Genpath => {
            let g = generator.as_ref().unwrap();
            chunked(&images, |_, b| Ok(g.generate_pathway(&model, b, Mode::Eval)?.masks))?
        }
        Method::Random => ids.iter().map(|&i| random_mask(&specs, c.sparsity, ctx.seed.wrapping_add(i as u64))).collect::<Result<_>>()?,
        Method::Taylor | Method::Intgrad | Method::Magnitude => {
            score_fields(&model, generator.as_ref(), score_method.unwrap(), &images, c.steps)?
                .iter()
                .map(|f| threshold_to_mask(f, c.sparsity, c.scope))
                .collect::<Result<_>>()?
        }
        Method::Greedy => {
            let fields = score_fields(&model, generator.as_ref(), c.greedy_scores, &images, c.steps)?;
            fields
                .iter()
                .enumerate()
                .map(|(i, f)| Ok(greedy_prune(&model, &images.index_outer(i), f, None, None)?.mask))
                .collect::<Result<_>>()?
        }
    };
    let predicted = argmax_rows(&forward(&model, &images)?);
    let mut entries = Vec::with_capacity(n);
    for (k, (&id, mask)) in ids.iter().zip(&masks).enumerate() {
        let file = format!("masks/{id:06}.npwy");
        let p = ctx.path(&file)?;
        write_mask(&p, mask)?;
        entries.push(IndexEntry {
            id,
            file: file.clone(),
            label: data.labels[id],
            predicted: predicted[k],
            firing_sparsity: mask.firing_sparsity(),
            layer_sparsity: (0..mask.num_layers()).map(|l| mask.layer_sparsity(l)).collect(),
        });
    }
    let (mean, sd) = mean_sd(&masks.iter().map(PathwayMask::firing_sparsity).collect::<Vec<_>>());
    let index = MaskIndex {
        schema_version: MANIFEST_SCHEMA_VERSION,
        method: c.method.name().into(),
        dataset: Some(c.dataset.clone()),
        normalization: ctx.normalization.clone(),
        model_checksum: Some(model.checksum()),
        generator: c.generator.clone(),
        score_method,
        steps: c.steps,
        mean_sparsity: mean,
        sparsity_sd: sd,
        entries,
    };
    ctx.json(INDEX_FILE, &index)?;
    ctx.metrics.insert("mean_firing_sparsity".into(), mean);
    ctx.metrics.insert("firing_sparsity_sd".into(), sd);
    ctx.metrics.insert("samples".into(), n as f64);
    Ok(())
}

/// Model, images, labels and masks of an explain output directory.
struct MaskSet {
    model: TargetModel,
    index: MaskIndex,
    data: Dataset,
    ids: Vec<usize>,
    images: Tensor,
    labels: Vec<usize>,
    masks: Vec<PathwayMask>,
}

fn open_mask_set(ctx: &mut Context, model: &Path, dir: &Path, dataset: Option<&DatasetSource>) -> Result<MaskSet> {
    let model = open_model(model)?;
    let index = open_index(dir)?;
    check_model_matches(&index, &model)?;
    let source = dataset
        .or(index.dataset.as_ref())
        .ok_or_else(|| Error::Config("no dataset given and none recorded in the mask index".into()))?
        .clone();
    let data = ctx.load_data(&source, index.normalization.as_ref())?;
    let ids: Vec<usize> = index.entries.iter().map(|e| e.id).collect();
    let images = subset_images(&data, &ids)?;
    let labels = ids.iter().map(|&i| data.labels[i]).collect();
    let masks = read_masks(dir, &index)?;
    for m in &masks {
        m.check_specs(model.layer_specs())?;
    }
    Ok(MaskSet { model, index, data, ids, images, labels, masks })
}

fn eval(ctx: &mut Context, c: &EvalConfig) -> Result<()> {
    let set = open_mask_set(ctx, &c.model, &c.masks, c.dataset.as_ref())?;
    let model = &set.model;
    let original = forward(model, &set.images)?;
    let predicted = argmax_rows(&original);
    let reference = match c.reference {
        AccuracyReference::Model => predicted.clone(),
        AccuracyReference::Label => set.labels.clone(),
    };
    let mut report = MetricReport::new(serde_json::to_value(c).expect("config serializes"));
    let (mean, sd) = mean_sd(&set.masks.iter().map(PathwayMask::firing_sparsity).collect::<Vec<_>>());
    report.metrics.insert("mean_firing_sparsity".into(), mean);
    report.metrics.insert("firing_sparsity_sd".into(), sd);

    if c.metrics.contains(&Metric::Faithfulness) {
        let masked = masked_forward(model, &set.images, &set.masks)?;
        let records = records_from_logits(&original, &masked, Some(&set.labels))?;
        report = report.with_records(records)?;
    }
    if c.metrics.contains(&Metric::Aciou) {
        let k = set.data.num_classes;
        let by_class = group_by_class(&set.masks, &set.labels, k);
        let a = aciou(&by_class)?;
        report.metrics.insert("aciou".into(), a.value);
        report.metrics.insert("aciou_literal".into(), a.literal);
        let random: Vec<PathwayMask> = set
            .masks
            .iter()
            .zip(&set.ids)
            .map(|(m, &id)| neuropath::baselines::random_like(m, ctx.seed.wrapping_add(id as u64)))
            .collect::<Result<_>>()?;
        report.metrics.insert("aciou_random".into(), aciou(&group_by_class(&random, &set.labels, k))?.value);
        let layers = (0..model.layer_specs().len()).map(|l| Ok(aciou_layer(&by_class, l)?.value)).collect::<Result<_>>()?;
        report.per_layer.insert("aciou".into(), layers);
    }
    if c.metrics.contains(&Metric::Roap) {
        let generator = match &set.index.generator {
            Some(p) if set.index.score_method == Some(ScoreMethod::Genpath) => Some(open_generator(p, model)?),
            _ => None,
        };
        let curve = match set.index.score_method {
            Some(m) => {
                let fields = score_fields(model, generator.as_ref(), m, &set.images, set.index.steps)?;
                Some(roap(model, &set.images, &fields, &c.roap_grid, Default::default(), &reference)?)
            }
            None => None,
        };
        let specs = model.layer_specs().to_vec();
        let mut csv = String::from("sparsity,method,random\n");
        for (g, &s) in c.roap_grid.iter().enumerate() {
            let random: Vec<PathwayMask> = if s >= 1.0 {
                vec![PathwayMask::zeros(&specs); set.ids.len()]
            } else {
                set.ids.iter().map(|&id| random_mask(&specs, s, ctx.seed.wrapping_add(id as u64))).collect::<Result<_>>()?
            };
            let r = removal_accuracy(model, &set.images, &random, &reference)?;
            report.metrics.insert(format!("roap_random@{s:.2}"), r);
            let m = curve.as_ref().map(|pts| pts[g].accuracy);
            if let Some(m) = m {
                report.metrics.insert(format!("roap@{s:.2}"), m);
            }
            csv.push_str(&format!("{s},{},{r}\n", m.map_or(String::from("nan"), |v| v.to_string())));
        }
        ctx.text("roap.csv", &csv)?;
    }
    ctx.metrics.extend(report.metrics.clone());
    ctx.json("report.json", &report)?;
    Ok(())
}

#[derive(Serialize)]
struct ClassPathwaySidecar<'a> {
    pathway: &'a ClassPathway,
    source_masks: &'a Path,
    method: &'a str,
    kept: usize,
    firing_sparsity: f64,
}

fn transfer(ctx: &mut Context, c: &TransferConfig) -> Result<()> {
    let set = open_mask_set(ctx, &c.model, &c.masks, c.dataset.as_ref())?;
    let model = &set.model;
    let original = forward(model, &set.images)?;
    let predicted = argmax_rows(&original);
    let instance = agreement(&argmax_rows(&masked_forward(model, &set.images, &set.masks)?), &predicted);
    let mut report = MetricReport::new(serde_json::to_value(c).expect("config serializes"));
    report.metrics.insert("instance_accuracy".into(), instance);
    let members = group_by_class(&set.masks, &set.labels, set.data.num_classes);
    let member_ids = group_by_class(&set.ids, &set.labels, set.data.num_classes);
    let mut csv = String::from("eps_ss,eps_cn,mean_size,mean_firing_sparsity,transfer_accuracy,instance_accuracy\n");
    for &ss in &c.eps_ss {
        for &cn in &c.eps_cn {
            let mut pathways = Vec::new();
            for (class, (masks, ids)) in members.iter().zip(&member_ids).enumerate() {
                if masks.is_empty() {
                    continue;
                }
                let ids: Vec<usize> = ids.iter().map(|&&i| i).collect();
                let p = build_class_pathway(class, masks, &ids, ss, cn, ctx.seed.wrapping_add(class as u64))?;
                let stem = format!("class_pathways/ss{ss:.2}_cn{cn:.2}_c{class}");
                let path = ctx.path(&format!("{stem}.npwy"))?;
                write_mask(&path, p.mask())?;
                let sidecar = ClassPathwaySidecar {
                    pathway: &p,
                    source_masks: &c.masks,
                    method: &set.index.method,
                    kept: p.mask().count_ones(),
                    firing_sparsity: p.mask().firing_sparsity(),
                };
                ctx.json(&format!("{stem}.json"), &sidecar)?;
                report.metrics.insert(format!("size@ss{ss:.2}_cn{cn:.2}_c{class}"), p.mask().count_ones() as f64);
                pathways.push(p);
            }
            let records = transfer_records(model, &set.images, &set.labels, &pathways, Some(&set.labels))?;
            let acc = accuracy(&records, AccuracyReference::Model)?;
            let sizes: Vec<f64> = pathways.iter().map(|p| p.mask().count_ones() as f64).collect();
            let sparsities: Vec<f64> = pathways.iter().map(|p| p.mask().firing_sparsity()).collect();
            let (size, _) = mean_sd(&sizes);
            let (sp, _) = mean_sd(&sparsities);
            report.metrics.insert(format!("transfer_accuracy@ss{ss:.2}_cn{cn:.2}"), acc);
            csv.push_str(&format!("{ss},{cn},{size},{sp},{acc},{instance}\n"));
        }
    }
    ctx.text("transfer.csv", &csv)?;
    ctx.metrics.extend(report.metrics.clone());
    ctx.json("report.json", &report)?;
    Ok(())
}

#[derive(Serialize)]
struct EmbeddingSidecar {
    layer: usize,
    features_within: f64,
    features_between: f64,
    scores_within: f64,
    scores_between: f64,
    within_delta_percent: f64,
    between_delta_percent: f64,
}

fn rgb(data: &Dataset, id: usize) -> Result<Tensor> {
    let img = data.denormalized(id);
    match img.shape()[0] {
        3 => Ok(img),
        1 => {
            let plane = img.data().to_vec();
            let (h, w) = (img.shape()[1], img.shape()[2]);
            Tensor::from_vec(&[3, h, w], plane.iter().chain(&plane).chain(&plane).copied().collect())
        }
        c => Err(Error::Shape(format!("cannot render {c}-channel images"))),
    }
}

fn viz_cmd(ctx: &mut Context, c: &VizConfig) -> Result<()> {
    if let Some(dir) = &c.masks {
        let set = open_mask_set(ctx, &c.model, dir, c.dataset.as_ref())?;
        let model = &set.model;
        let ones = PathwayMask::ones(model.layer_specs());
        for (k, &id) in set.ids.iter().take(c.count).enumerate() {
            let image = set.images.index_outer(k);
            let class = set.index.entries[k].predicted;
            let picture = rgb(&set.data, id)?;
            ctx.png(&format!("image_{id:06}.png"), &viz::upscale(&viz::to_image(&picture)?, c.scale))?;
            let cam = cam_on_pathway(model, &image, &set.masks[k], class)?;
            let full = cam_on_pathway(model, &image, &ones, class)?;
            ctx.png(&format!("cam_{id:06}.png"), &viz::upscale(&viz::to_image(&viz::overlay(&picture, &cam)?)?, c.scale))?;
            ctx.png(&format!("cam_full_{id:06}.png"), &viz::upscale(&viz::to_image(&viz::overlay(&picture, &full)?)?, c.scale))?;
            let sal = viz::saliency(model, &image, &set.masks[k], class)?;
            ctx.png(&format!("saliency_{id:06}.png"), &viz::upscale(&viz::to_image(&sal)?, c.scale))?;
        }
        if let Some(gpath) = &c.generator {
            let g = open_generator(gpath, model)?;
            let layers = model.layer_specs().len();
            let mut features = vec![Vec::new(); layers];
            let mut scores = vec![Vec::new(); layers];
            chunked(&set.images, |_, b| {
                let (_, acts) = model.capture_activations(b)?;
                let out = g.generate_pathway(model, b, Mode::Eval)?;
                for l in 0..layers {
                    for i in 0..b.shape()[0] {
                        features[l].push(acts.layers()[l].index_outer(i).into_data());
                        scores[l].push(out.scores.pdn_scores[l].index_outer(i).into_data());
                    }
                }
                Ok(Vec::<()>::new())
            })?;
            let mut sidecar = Vec::new();
            for l in 0..layers {
                let f = class_variance_stats(&features[l], &set.labels)?;
                let s = class_variance_stats(&scores[l], &set.labels)?;
                ctx.png(&format!("embedding_layer{l}_features.png"), &viz::scatter(&viz::pca_2d(&features[l])?, &set.labels, 256))?;
                ctx.png(&format!("embedding_layer{l}_scores.png"), &viz::scatter(&viz::pca_2d(&scores[l])?, &set.labels, 256))?;
                let e = EmbeddingSidecar {
                    layer: l,
                    features_within: f.within,
                    features_between: f.between,
                    scores_within: s.within,
                    scores_between: s.between,
                    within_delta_percent: variance_delta(f.within, s.within),
                    between_delta_percent: variance_delta(f.between, s.between),
                };
                ctx.metrics.insert(format!("within_delta@layer{l}"), e.within_delta_percent);
                ctx.metrics.insert(format!("between_delta@layer{l}"), e.between_delta_percent);
                sidecar.push(e);
            }
            ctx.json("embedding.json", &sidecar)?;
        }
    }
    for path in &c.curves {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let (_, cols) = viz::read_csv_columns(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let series: Vec<Vec<(f64, f64)>> = cols[1..]
            .iter()
            .filter(|col| col.iter().all(|v| v.is_finite()))
            .map(|col| cols[0].iter().copied().zip(col.iter().copied()).collect())
            .collect();
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("curve");
        ctx.png(&format!("{stem}.png"), &viz::line_chart(&series, 400))?;
    }
    Ok(())
}
