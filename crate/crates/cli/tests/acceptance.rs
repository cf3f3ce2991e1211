//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed. Criteria 4-8 share one desk-scale run
//! (toy classifier on two-blob data, generator trained through the CLI).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use neuropath::autograd::Tape;
use neuropath::baselines::ThresholdScope;
use neuropath::data::DatasetSource;
use neuropath::evaluation::{accuracy, aciou, icr, mdc, mic, AccuracyReference, PredictionRecord};
use neuropath::generator::{daq_binarize, GeneratorConfig, Mode};
use neuropath::instrumentation::{Architecture, LayerSpec, PathwayMask, TargetModel};
use neuropath::io::{decode_mask, encode_mask, read_mask, write_mask};
use neuropath::training::TrainConfig;
use neuropath::Tensor;
use neuropath_cli::config::*;
use neuropath_cli::{rerun, run, Manifest};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_images(n: usize, shape: (usize, usize, usize), seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = shape;
    Tensor::from_vec(&[n, c, h, w], (0..n * c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

fn identity_error(model: &TargetModel, images: &Tensor) -> Result<f64, String> {
    let plain = model.forward(images).map_err(|e| e.to_string())?;
    let ones = vec![PathwayMask::ones(model.layer_specs()); images.shape()[0]];
    let masked = model.masked_forward(images, &ones).map_err(|e| e.to_string())?;
    Ok(plain
        .data()
        .iter()
        .zip(masked.data())
        .map(|(a, b)| (a - b).abs() / a.abs().max(1e-12))
        .fold(0.0, f64::max))
}

fn criterion_1() -> Check {
    let mut parts = Vec::new();
    for (arch, shape) in [(Architecture::Toy3, (3, 16, 16)), (Architecture::AlexNet32, (3, 32, 32))] {
        let model = arch.build(shape, 10, 11).map_err(|e| e.to_string())?;
        let err = identity_error(&model, &random_images(100, shape, 5))?;
        ensure(err <= 1e-5, format!("{}: max relative error {err:e}", arch.name()))?;
        parts.push(format!("{} {err:.1e}", arch.name()));
    }
    Ok(format!("max relative error: {}", parts.join(", ")))
}

fn criterion_2() -> Check {
    let mut cfg = GeneratorConfig::for_layers(&[LayerSpec::new(1, 100, 100)]).map_err(|e| e.to_string())?;
    let grid: Vec<f64> = (0..10_000).map(|i| -0.5 + 2.0 * i as f64 / 9_999.0).collect();
    let decoded = Tensor::from_vec(&[1, 1, 100, 100], grid.clone()).unwrap();
    let hard = daq_binarize(std::slice::from_ref(&decoded), &cfg, Mode::Eval).map_err(|e| e.to_string())?;
    ensure(hard[0].data().iter().all(|&v| v == 0.0 || v == 1.0), "eval output outside {0, 1}")?;

    // tape gradient of the relaxed mask against central differences
    let params = cfg.daq();
    let tape = Tape::new();
    let x = tape.param(decoded.clone());
    let y = tape.daq(x, params);
    let grads = tape.backward(tape.sum(y));
    let g = grads.get(x).ok_or("no gradient for the scores")?.clone();
    let h = 1e-6;
    let f = |d: f64| params.soft(d).0;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (i, &d) in grid.iter().enumerate() {
        // skip the level midpoint and the kinks at the levels and clamp bounds
        if [0.0, 0.5, 1.0].iter().any(|k| (d - k).abs() < 1e-3) {
            continue;
        }
        let fd = (f(d + h) - f(d - h)) / (2.0 * h);
        worst = worst.max((fd - g.data()[i]).abs());
        checked += 1;
    }
    ensure(worst <= 1e-3, format!("gradient error {worst:e}"))?;

    let mut gaps = Vec::new();
    for tau in [1.0, 0.1, 0.01] {
        cfg.tau = tau;
        let soft = daq_binarize(std::slice::from_ref(&decoded), &cfg, Mode::Train).map_err(|e| e.to_string())?;
        gaps.push(soft[0].data().iter().zip(hard[0].data()).map(|(s, h)| (s - h).abs()).sum::<f64>() / grid.len() as f64);
    }
    ensure(gaps[0] > gaps[1] && gaps[1] > gaps[2], format!("soft-hard gaps not decreasing: {gaps:?}"))?;
    Ok(format!("binary on 1e4 grid; max |grad - fd| {worst:.1e} over {checked} points; soft-hard gap {:.3} > {:.4} > {:.5}", gaps[0], gaps[1], gaps[2]))
}

fn criterion_3() -> Check {
    let rows: [([f64; 3], [f64; 3], usize); 6] = [
        ([0.7, 0.2, 0.1], [0.8, 0.1, 0.1], 0),
        ([0.2, 0.5, 0.3], [0.1, 0.6, 0.3], 1),
        ([0.1, 0.3, 0.6], [0.2, 0.3, 0.5], 1),
        ([0.6, 0.3, 0.1], [0.3, 0.6, 0.1], 0),
        ([0.4, 0.35, 0.25], [0.4, 0.35, 0.25], 0),
        ([0.05, 0.9, 0.05], [0.25, 0.7, 0.05], 1),
    ];
    let records: Vec<PredictionRecord> =
        rows.iter().map(|(o, m, l)| PredictionRecord::new(o.to_vec(), m.to_vec(), Some(*l)).unwrap()).collect();
    // rises of 0.1 and 0.1, drops of 0.1 and 0.2 among the five agreeing rows
    let expected = [
        ("accuracy", accuracy(&records, AccuracyReference::Model).unwrap(), 500.0 / 6.0),
        ("label accuracy", accuracy(&records, AccuracyReference::Label).unwrap(), 400.0 / 6.0),
        ("mIC", mic(&records).unwrap(), 20.0 / 6.0),
        ("mDC", mdc(&records).unwrap(), 30.0 / 6.0),
        ("ICr", icr(&records).unwrap(), 200.0 / 6.0),
    ];
    for (name, got, want) in expected {
        ensure((got - want).abs() <= 1e-12, format!("{name}: {got} vs {want}"))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let words: Vec<u64> = (0..8).map(|i| if i == 6 { 0 } else { rng.gen::<u64>() & rng.gen::<u64>() }).collect();
    let classes = [0usize, 1, 0, 2, 1, 0, 1, 1];
    let specs = [LayerSpec::new(1, 8, 8)];
    let masks: Vec<PathwayMask> = words
        .iter()
        .map(|w| PathwayMask::from_bits(&specs, &(0..64).map(|b| (w >> b) & 1 == 1).collect::<Vec<_>>()).unwrap())
        .collect();
    let grouped: Vec<Vec<&PathwayMask>> =
        (0..3).map(|c| masks.iter().zip(&classes).filter(|(_, k)| **k == c).map(|(m, _)| m).collect()).collect();
    let got = aciou(&grouped).map_err(|e| e.to_string())?.value;
    let mut per_class = Vec::new();
    for c in 0..3 {
        let ws: Vec<u64> = words.iter().zip(&classes).filter(|(_, k)| **k == c).map(|(w, _)| *w).collect();
        if ws.len() < 2 {
            continue;
        }
        let (mut sum, mut pairs) = (0.0, 0);
        for i in 0..ws.len() {
            for j in i + 1..ws.len() {
                let union = (ws[i] | ws[j]).count_ones();
                sum += if union == 0 { 0.0 } else { (ws[i] & ws[j]).count_ones() as f64 / union as f64 };
                pairs += 1;
            }
        }
        per_class.push(100.0 * sum / pairs as f64);
    }
    let want = per_class.iter().sum::<f64>() / per_class.len() as f64;
    ensure(got == want, format!("acIOU {got} vs brute force {want}"))?;
    Ok(format!("6-record table exact to 1e-12; acIOU {got:.6} equals bit-set oracle"))
}

struct Desk {
    dir: PathBuf,
    runs: BTreeMap<&'static str, Manifest>,
}

impl Desk {
    fn metrics(&self, run: &str) -> &BTreeMap<String, f64> {
        &self.runs[run].metrics
    }

    fn metric(&self, run: &str, key: &str) -> Result<f64, String> {
        self.metrics(run).get(key).copied().ok_or_else(|| format!("{run} did not report {key}"))
    }
}

fn desk_run(dir: &Path) -> Result<Desk, String> {
    let _ = fs::remove_dir_all(dir);
    let blobs = |count, seed| DatasetSource::Blobs { count, seed };
    let cfg = |name: &str, command| RunConfig { out: dir.join(name), seed: 0, command };
    let mut runs = BTreeMap::new();
    let mut go = |name: &'static str, command| -> Result<(), String> {
        let manifest = run(&cfg(name, command)).map_err(|e| format!("{name}: {e}"))?;
        runs.insert(name, manifest);
        Ok(())
    };
    go(
        "fixture",
        CommandConfig::Fixture(FixtureConfig {
            arch: "toy3".into(),
            dataset: blobs(512, 1),
            test: Some(blobs(200, 2)),
            epochs: 4,
            learning_rate: 3e-3,
            batch_size: 32,
        }),
    )?;
    let model = dir.join("fixture/model.ck");
    go(
        "train",
        CommandConfig::Train(TrainCommand {
            model: model.clone(),
            dataset: blobs(512, 1),
            train: TrainConfig {
                alpha: 1.0,
                beta: 0.001,
                learning_rate: 1e-3,
                epochs: 8,
                batch_size: 32,
                seed: 0,
                checkpoint_every: 4,
                dataset: None,
            },
            generator: GeneratorOptions::default(),
        }),
    )?;
    go(
        "explain",
        CommandConfig::Explain(ExplainConfig {
            model: model.clone(),
            generator: Some(dir.join("train/generator.ck")),
            dataset: blobs(200, 2),
            method: Method::Genpath,
            sparsity: 0.9,
            scope: ThresholdScope::PerLayer,
            steps: 20,
            greedy_scores: neuropath::baselines::ScoreMethod::Taylor,
            limit: None,
        }),
    )?;
    let masks = dir.join("explain");
    go(
        "eval",
        CommandConfig::Eval(EvalConfig {
            model: model.clone(),
            masks: masks.clone(),
            dataset: None,
            metrics: vec![Metric::Faithfulness, Metric::Aciou, Metric::Roap],
            roap_grid: vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
            reference: neuropath::evaluation::AccuracyReference::Model,
        }),
    )?;
    go(
        "transfer",
        CommandConfig::Transfer(TransferConfig {
            model,
            masks,
            dataset: None,
            eps_ss: vec![0.6],
            eps_cn: vec![0.0, 0.25, 0.5, 0.75, 0.9],
        }),
    )?;
    Ok(Desk { dir: dir.to_path_buf(), runs })
}

fn desk() -> Result<&'static Desk, String> {
    static DESK: OnceLock<Result<Desk, String>> = OnceLock::new();
    DESK.get_or_init(|| desk_run(&Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))).as_ref().map_err(Clone::clone)
}

fn criterion_4() -> Check {
    let d = desk()?;
    let test_acc = d.metric("fixture", "test_accuracy")?;
    ensure(test_acc >= 97.0, format!("classifier test accuracy {test_acc}"))?;
    let epochs = d.metric("train", "epochs")?;
    ensure(epochs <= 10.0, format!("{epochs} epochs"))?;
    ensure(d.runs["train"].outputs.iter().any(|o| o.ends_with(".ck")), "no checkpoint written")?;
    let agree = d.metric("eval", "accuracy")?;
    let sparsity = d.metric("explain", "mean_firing_sparsity")?;
    let sd = d.metric("explain", "firing_sparsity_sd")?;
    ensure(agree >= 95.0, format!("agreement {agree}"))?;
    ensure(sparsity >= 0.40, format!("mean firing sparsity {sparsity}"))?;
    ensure(sd > 0.0, "per-instance sparsity is constant")?;
    Ok(format!(
        "classifier {test_acc:.1}%, {epochs} epochs, agreement {agree:.1}%, firing sparsity {sparsity:.3} (sd {sd:.4})"
    ))
}

fn criterion_5() -> Check {
    let d = desk()?;
    let mut row = Vec::new();
    for s in [0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8] {
        let gen = d.metric("eval", &format!("roap@{s:.2}"))?;
        let rnd = d.metric("eval", &format!("roap_random@{s:.2}"))?;
        ensure(gen <= rnd, format!("at {s}: pathway removal {gen} > random {rnd}"))?;
        row.push(format!("{s}: {gen:.1}/{rnd:.1}"));
    }
    let margin = d.metric("eval", "roap_random@0.50")? - d.metric("eval", "roap@0.50")?;
    ensure(margin >= 5.0, format!("margin at 50% is {margin}"))?;
    Ok(format!("pathway/random accuracy {}; margin at 50% {margin:.1}", row.join(", ")))
}

fn criterion_6() -> Check {
    let d = desk()?;
    let gen = d.metric("eval", "aciou")?;
    let rnd = d.metric("eval", "aciou_random")?;
    ensure(gen - rnd >= 10.0, format!("acIOU {gen} vs random {rnd}"))?;
    Ok(format!("acIOU {gen:.2} vs random {rnd:.2}"))
}

fn criterion_7() -> Check {
    let d = desk()?;
    let instance = d.metric("transfer", "instance_accuracy")?;
    let transfer = d.metric("transfer", "transfer_accuracy@ss0.60_cn0.50")?;
    ensure(transfer >= 0.9 * instance, format!("transfer {transfer} vs instance {instance}"))?;
    let grid = [0.0, 0.25, 0.5, 0.75, 0.9];
    for class in 0..2 {
        let sizes: Vec<f64> =
            grid.iter().map(|cn| d.metric("transfer", &format!("size@ss0.60_cn{cn:.2}_c{class}"))).collect::<Result<_, _>>()?;
        ensure(sizes.windows(2).all(|w| w[1] <= w[0]), format!("class {class} sizes not monotone: {sizes:?}"))?;
    }
    Ok(format!("transfer {transfer:.1}% vs instance {instance:.1}%; |P_c| non-increasing over eps_cn"))
}

fn criterion_8() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tmp = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-masks");
    fs::create_dir_all(&tmp).map_err(|e| e.to_string())?;
    for i in 0..1000 {
        let specs: Vec<LayerSpec> = (0..rng.gen_range(1..5))
            .map(|_| LayerSpec::new(rng.gen_range(1..9), rng.gen_range(1..13), rng.gen_range(1..13)))
            .collect();
        let total: usize = specs.iter().map(LayerSpec::len).sum();
        let density = rng.gen::<f64>();
        let bits: Vec<bool> = (0..total).map(|_| rng.gen::<f64>() < density).collect();
        let mask = PathwayMask::from_bits(&specs, &bits).unwrap();
        let back = if i % 10 == 0 {
            let p = tmp.join("m.npwy");
            write_mask(&p, &mask).map_err(|e| e.to_string())?;
            read_mask(&p).map_err(|e| e.to_string())?
        } else {
            decode_mask(&encode_mask(&mask).map_err(|e| e.to_string())?)?
        };
        ensure(back.bits() == bits && back.specs() == specs, format!("mask {i} did not round-trip"))?;
    }

    let d = desk()?;
    let mut worst = 0.0f64;
    for (name, original) in &d.runs {
        let again = rerun(&d.dir.join(name).join(MANIFEST_FILE), Some(d.dir.join(format!("rerun-{name}")))).map_err(|e| e.to_string())?;
        ensure(again.metrics.len() == original.metrics.len(), format!("{name}: metric sets differ"))?;
        for (k, v) in &original.metrics {
            let w = again.metrics.get(k).ok_or_else(|| format!("{name}: rerun lacks {k}"))?;
            worst = worst.max((v - w).abs());
        }
    }
    ensure(worst <= 1e-9, format!("rerun metric drift {worst:e}"))?;
    Ok(format!("1000 masks bit-exact; {} commands rerun from manifests, max drift {worst:e}", d.runs.len()))
}

fn main() {
    let criteria: [(u32, &str, u64, fn() -> Check); 8] = [
        (1, "identity faithfulness", 60, criterion_1),
        (2, "quantizer exactness and gradients", 60, criterion_2),
        (3, "metric oracles", 10, criterion_3),
        (4, "desk training", 900, criterion_4),
        (5, "removal trend", 300, criterion_5),
        (6, "class relevance", 120, criterion_6),
        (7, "transferability", 300, criterion_7),
        (8, "persistence", 120, criterion_8),
    ];
    let mut failed = 0;
    for (n, name, limit, check) in criteria {
        let start = Instant::now();
        let result = check();
        let took = start.elapsed();
        let over = took > Duration::from_secs(limit);
        let (verdict, detail) = match (&result, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("{d}; exceeded {limit}s budget")),
            (Err(e), _) => ("FAIL", e.clone()),
        };
        if verdict == "FAIL" {
            failed += 1;
        }
        println!("criterion {n} ({name}): {verdict} [{:.1}s] {detail}", took.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
