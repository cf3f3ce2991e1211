use super::*;
use crate::instrumentation::{Architecture, LayerSpec};

fn one_layer(size: usize, shared: usize, filter: usize) -> GeneratorConfig {
    let spec = LayerSpec::new(1, size, size);
    let mut cfg = GeneratorConfig::for_layers(&[spec]).unwrap();
    cfg.shared_resolution = (shared, shared);
    cfg.filter_sizes = vec![(filter, filter)];
    cfg.normalize = false;
    cfg.pdn_depth = 1;
    cfg.pdn_hidden = shared * shared;
    cfg
}

fn ramp(shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|i| ((i * 7 % 13) as f64) * scale).collect()).unwrap()
}

#[test]
fn identity_filter_passes_activations_through() {
    let mut g = Generator::new(one_layer(4, 4, 1)).unwrap();
    g.rfe[0].weight = Tensor::ones(&[1, 1, 1, 1]);
    g.rfe[0].bias = Tensor::zeros(&[1]);
    let a = ramp(&[2, 1, 4, 4], 0.1);
    let acts = ActivationSet::new(vec![a.clone()]).unwrap();
    let p = g.rfe_embed(&acts, Mode::Eval).unwrap();
    assert!(p.layers[0].max_abs_diff(&a) < 1e-12);
}

#[test]
fn embedding_shrinks_by_filter_minus_one_per_iteration() {
    let cfg = one_layer(8, 4, 3);
    assert_eq!(cfg.iterations(0), 2);
    let g = Generator::new(cfg).unwrap();
    let acts = ActivationSet::new(vec![ramp(&[1, 1, 8, 8], 0.1)]).unwrap();
    let tape = Tape::new();
    let params = g.bind(&tape, false);
    let x = tape.constant(acts.layers()[0].clone());
    let first = tape.conv2d(x, params[0], Some(params[1]), (1, 1), (0, 0));
    assert_eq!(tape.shape(first), vec![1, 1, 6, 6]);
    let p = g.rfe_embed(&acts, Mode::Eval).unwrap();
    assert_eq!(p.layers[0].shape(), &[1, 1, 4, 4]);
}

#[test]
fn zero_activations_embed_to_zero_with_zero_bias() {
    let g = Generator::new(one_layer(8, 4, 2)).unwrap();
    let acts = ActivationSet::new(vec![Tensor::zeros(&[3, 1, 8, 8])]).unwrap();
    let p = g.rfe_embed(&acts, Mode::Eval).unwrap();
    assert!(p.layers[0].data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_identity_scorer_layer_is_identity() {
    let mut g = Generator::new(one_layer(8, 4, 2)).unwrap();
    let mut eye = Tensor::zeros(&[16, 16]);
    for i in 0..16 {
        eye.data_mut()[i * 16 + i] = 1.0;
    }
    g.pdn[0].weight = eye;
    let patterns = EmbeddedPatterns { layers: vec![ramp(&[2, 1, 4, 4], 0.3)] };
    let scores = g.pdn_score(&patterns).unwrap();
    assert!(scores[0].max_abs_diff(&patterns.layers[0]) < 1e-12);
}

#[test]
fn decoder_grows_back_to_native_resolution() {
    let cfg = one_layer(8, 4, 3);
    let g = Generator::new(cfg).unwrap();
    let tape = Tape::new();
    let params = g.bind(&tape, false);
    let skip = 2 + 2 * g.rfe[0].norms.len();
    let x = tape.constant(ramp(&[1, 1, 4, 4], 0.1));
    let mid = tape.conv_transpose2d(x, params[skip], Some(params[skip + 1]), (1, 1), (0, 0));
    assert_eq!(tape.shape(mid), vec![1, 1, 6, 6]);
    let d = g.rpd_decode(&[ramp(&[1, 1, 4, 4], 0.1)], Mode::Eval).unwrap();
    assert_eq!(d[0].shape(), &[1, 1, 8, 8]);
}

#[test]
fn full_pipeline_round_trips_shapes() {
    let model = Architecture::Toy3.build((3, 16, 16), 2, 1).unwrap();
    let g = Generator::new(GeneratorConfig::for_layers(model.layer_specs()).unwrap()).unwrap();
    let images = ramp(&[3, 3, 16, 16], 0.01);
    let out = g.generate_pathway(&model, &images, Mode::Eval).unwrap();
    assert_eq!(out.masks.len(), 3);
    for (i, spec) in model.layer_specs().iter().enumerate() {
        assert_eq!(out.scores.patterns[i].shape(), &[3, spec.channels, 4, 4]);
        assert_eq!(out.scores.pdn_scores[i].shape(), &[3, spec.channels, 4, 4]);
        assert_eq!(out.scores.decoded[i].shape(), &[3, spec.channels, spec.height, spec.width]);
    }
    for m in &out.masks {
        assert!(m.is_finalized());
        m.check_specs(model.layer_specs()).unwrap();
    }
}

#[test]
fn eval_masks_are_batch_equivariant() {
    let model = Architecture::Toy3.build((3, 16, 16), 2, 4).unwrap();
    let g = Generator::new(GeneratorConfig::for_layers(model.layer_specs()).unwrap()).unwrap();
    let images = ramp(&[2, 3, 16, 16], 0.02);
    let both = g.generate_pathway(&model, &images, Mode::Eval).unwrap();
    for s in 0..2 {
        let single = Tensor::stack(&[images.index_outer(s)]).unwrap();
        let one = g.generate_pathway(&model, &single, Mode::Eval).unwrap();
        assert_eq!(one.masks[0], both.masks[s]);
        for l in 0..3 {
            assert!(one.scores.decoded[l].max_abs_diff(&Tensor::stack(&[both.scores.decoded[l].index_outer(s)]).unwrap()) < 1e-9);
        }
    }
}

#[test]
fn eval_quantization_is_binary_and_monotone() {
    let cfg = one_layer(4, 4, 1);
    let d = Tensor::from_vec(&[1, 1, 1, 7], vec![-1.0, 0.0, 0.3, 0.5, 0.51, 1.0, 2.0]).unwrap();
    let hard = daq_binarize(std::slice::from_ref(&d), &cfg, Mode::Eval).unwrap();
    assert_eq!(hard[0].data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    let soft = daq_binarize(std::slice::from_ref(&d), &cfg, Mode::Train).unwrap();
    let v = soft[0].data();
    assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)));
    assert!(v.windows(2).all(|w| w[0] <= w[1] + 1e-15));
    let bad = Tensor::from_vec(&[1, 1, 1, 1], vec![f64::NAN]).unwrap();
    assert!(matches!(daq_binarize(&[bad], &cfg, Mode::Eval), Err(Error::Numerical(_))));
    let mut flipped = cfg.clone();
    flipped.quant_lower = 2.0;
    assert!(matches!(daq_binarize(&[d], &flipped, Mode::Eval), Err(Error::Config(_))));
}

#[test]
fn soft_assignment_approaches_hard_as_temperature_drops() {
    let mut cfg = one_layer(4, 4, 1);
    let d = Tensor::from_vec(&[1, 1, 1, 4], vec![0.1, 0.35, 0.65, 0.9]).unwrap();
    let hard = daq_binarize(std::slice::from_ref(&d), &cfg, Mode::Eval).unwrap();
    let mut last = f64::INFINITY;
    for tau in [1.0, 0.1, 0.01] {
        cfg.tau = tau;
        let soft = daq_binarize(std::slice::from_ref(&d), &cfg, Mode::Train).unwrap();
        let gap = soft[0].max_abs_diff(&hard[0]);
        assert!(gap < last);
        last = gap;
    }
    assert!(last < 1e-6);
}

#[test]
fn same_seed_same_generator() {
    let specs = [LayerSpec::new(2, 8, 8), LayerSpec::new(3, 4, 4)];
    let mut cfg = GeneratorConfig::for_layers(&specs).unwrap();
    cfg.seed = 11;
    let a = Generator::new(cfg.clone()).unwrap();
    let b = Generator::new(cfg.clone()).unwrap();
    assert_eq!(a, b);
    cfg.seed = 12;
    assert_ne!(a, Generator::new(cfg).unwrap());
}

#[test]
fn named_tensors_round_trip() {
    let specs = [LayerSpec::new(2, 8, 8), LayerSpec::new(3, 4, 4)];
    let cfg = GeneratorConfig::for_layers(&specs).unwrap();
    let mut g = Generator::new(cfg.clone()).unwrap();
    g.norms_mut()[0].running_mean[1] = 0.25;
    let back = Generator::from_named_tensors(cfg.clone(), &g.named_tensors()).unwrap();
    assert_eq!(back, g);
    let mut short = g.named_tensors();
    short.pop();
    assert!(Generator::from_named_tensors(cfg, &short).is_err());
}

#[test]
fn mismatched_activations_are_rejected() {
    let g = Generator::new(one_layer(8, 4, 2)).unwrap();
    let acts = ActivationSet::new(vec![Tensor::zeros(&[1, 2, 8, 8])]).unwrap();
    assert!(matches!(g.rfe_embed(&acts, Mode::Eval), Err(Error::Shape(_))));
    let model = Architecture::Toy3.build((3, 16, 16), 2, 0).unwrap();
    assert!(matches!(g.generate_pathway(&model, &Tensor::zeros(&[1, 3, 16, 16]), Mode::Eval), Err(Error::Config(_))));
}

#[test]
fn relaxed_mask_gradient_matches_finite_differences() {
    let specs = [LayerSpec::new(2, 6, 6), LayerSpec::new(2, 4, 4)];
    let mut cfg = GeneratorConfig::for_layers(&specs).unwrap();
    cfg.pdn_hidden = 12;
    cfg.tau = 0.5;
    cfg.score_init = 0.5;
    cfg.seed = 3;
    let g = Generator::new(cfg).unwrap();
    let acts = [ramp(&[3, 2, 6, 6], 0.05), ramp(&[3, 2, 4, 4], 0.07)];
    let weights: Vec<Tensor> = specs.iter().map(|s| ramp(&[3, s.channels, s.height, s.width], 0.1)).collect();

    let objective = |g: &Generator| -> (f64, Vec<Tensor>) {
        let tape = Tape::new();
        let params = g.bind(&tape, true);
        let a: Vec<Var> = acts.iter().map(|t| tape.constant(t.clone())).collect();
        let f = g.forward_on(&tape, &params, &a, Mode::Train);
        let mut total = None;
        for (r, w) in f.relaxed.iter().zip(&weights) {
            let term = tape.sum(tape.mul(*r, tape.constant(w.clone())));
            total = Some(match total {
                None => term,
                Some(t) => tape.add(t, term),
            });
        }
        let root = total.unwrap();
        let value = tape.value(root).item();
        let grads = tape.backward(root);
        (value, params.iter().map(|&p| grads.get(p).cloned().unwrap_or_else(|| Tensor::zeros(&tape.shape(p)))).collect())
    };

    let (_, analytic) = objective(&g);
    let h = 1e-6;
    let count = g.params().len();
    let mut checked = 0;
    for p in 0..count {
        for e in [0, g.params()[p].len() / 2] {
            let mut plus = g.clone();
            plus.params_mut()[p].data_mut()[e] += h;
            let mut minus = g.clone();
            minus.params_mut()[p].data_mut()[e] -= h;
            let numeric = (objective(&plus).0 - objective(&minus).0) / (2.0 * h);
            let a = analytic[p].data()[e];
            assert!((numeric - a).abs() <= 1e-4 * (1.0 + numeric.abs()), "param {p} entry {e}: {a} vs {numeric}");
            checked += 1;
        }
    }
    assert!(checked >= 2 * count);
}
