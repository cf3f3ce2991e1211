use std::sync::OnceLock;

use neuropath::data::{Dataset, DatasetSource, Normalization};
use neuropath::fixtures::{label_accuracy, toy_classifier};
use neuropath::generator::{Generator, GeneratorConfig, Mode};
use neuropath::instrumentation::{argmax_rows, TargetModel};
use neuropath::io::{load_generator, save_generator, GeneratorMeta};
use neuropath::training::{train, TrainConfig, TrainState};

struct Fixture {
    model: TargetModel,
    train: Dataset,
    test: Dataset,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let norm = Normalization::centered();
        let train = DatasetSource::Blobs { count: 256, seed: 1 }.load(&norm).unwrap();
        let test = DatasetSource::Blobs { count: 100, seed: 2 }.load(&norm).unwrap();
        let model = toy_classifier(&train, 0).unwrap();
        Fixture { model, train, test }
    })
}

fn trained(beta: f64, epochs: usize, lr: f64) -> TrainState {
    let f = fixture();
    let generator = Generator::new(GeneratorConfig::for_layers(f.model.layer_specs()).unwrap()).unwrap();
    let cfg = TrainConfig { beta, epochs, learning_rate: lr, ..TrainConfig::default() };
    let mut state = TrainState::new(generator, &cfg);
    train(&f.model, &mut state, &f.train.images, &cfg, &mut |_, _| Ok(())).unwrap();
    state
}

#[test]
fn huge_sparsity_weight_raises_sparsity_every_epoch() {
    let state = trained(1e6, 3, 1e-3);
    let s = state.epoch_sparsity();
    assert_eq!(s.len(), 3);
    assert!(s.windows(2).all(|w| w[1] > w[0]), "epoch sparsity {s:?}");
}

#[test]
fn without_sparsity_pathways_keep_accuracy() {
    let f = fixture();
    let state = trained(0.0, 3, 1e-3);
    let target = 100.0 * label_accuracy(&f.model, &f.test).unwrap();
    let masks = state.generator.generate_pathway(&f.model, &f.test.images, Mode::Eval).unwrap().masks;
    let pred = argmax_rows(&f.model.masked_forward(&f.test.images, &masks).unwrap());
    let pathway = 100.0 * pred.iter().zip(&f.test.labels).filter(|(p, l)| p == l).count() as f64 / f.test.len() as f64;
    assert!(pathway >= target - 1.0, "pathway {pathway} vs target {target}");
}

#[test]
fn reloaded_generator_reproduces_masks() {
    let f = fixture();
    let state = trained(0.001, 1, 1e-3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.ck");
    let meta = GeneratorMeta {
        kind: "generator".into(),
        config: state.generator.config().clone(),
        epoch: state.epoch,
        train: None,
        model_checksum: Some(f.model.checksum()),
    };
    save_generator(&path, &state.generator, meta).unwrap();
    let (g, meta) = load_generator(&path).unwrap();
    assert_eq!(meta.epoch, 1);
    let a = state.generator.generate_pathway(&f.model, &f.test.images, Mode::Eval).unwrap();
    let b = g.generate_pathway(&f.model, &f.test.images, Mode::Eval).unwrap();
    assert_eq!(a.masks, b.masks);
    assert_eq!(a.scores.decoded, b.scores.decoded);
}
