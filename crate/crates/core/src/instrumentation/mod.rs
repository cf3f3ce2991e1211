//! Target-model instrumentation: capture of post-ReLU feature maps and
//! re-execution with those feature maps multiplied by a pathway mask.

mod mask;
mod model;

pub use mask::{ActivationSet, LayerSpec, PathwayMask};
pub use model::{
    argmax_rows, softmax_rows, Architecture, BatchNormLayer, Conv2dLayer, Layer, LinearLayer, MaskedGradients, TargetModel,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    fn random_images(seed: u64, n: usize, input: (usize, usize, usize)) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * input.0 * input.1 * input.2;
        t(&[n, input.0, input.1, input.2], (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// 1x1 input, conv 1->2 channels (weights 1.5, 0.5; biases 0, 1),
    /// ReLU, linear head [[1, 2], [3, -1]] + (0.5, 0).
    fn two_neuron_model() -> TargetModel {
        TargetModel::new(
            "two-neuron",
            (1, 1, 1),
            vec![
                Layer::Conv2d(Conv2dLayer {
                    weight: t(&[2, 1, 1, 1], vec![1.5, 0.5]),
                    bias: Some(t(&[2], vec![0.0, 1.0])),
                    stride: 1,
                    pad: 0,
                }),
                Layer::Relu,
                Layer::Flatten,
                Layer::Linear(LinearLayer { weight: t(&[2, 2], vec![1.0, 2.0, 3.0, -1.0]), bias: Some(t(&[2], vec![0.5, 0.0])) }),
            ],
        )
        .unwrap()
    }

    #[test]
    fn zero_network_gives_zero_everything() {
        let mut model = Architecture::Toy3.build((3, 16, 16), 2, 7).unwrap();
        for w in model.tensors_mut() {
            w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let (logits, acts) = model.capture_activations(&random_images(1, 3, (3, 16, 16))).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        assert!(acts.layers().iter().all(|a| a.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn one_filter_conv_by_hand() {
        // conv weight 2, no bias: relu(2 * 3) = 6
        let model = TargetModel::new(
            "one",
            (1, 1, 1),
            vec![
                Layer::Conv2d(Conv2dLayer { weight: t(&[1, 1, 1, 1], vec![2.0]), bias: None, stride: 1, pad: 0 }),
                Layer::Relu,
                Layer::Flatten,
                Layer::Linear(LinearLayer { weight: t(&[1, 1], vec![1.0]), bias: None }),
            ],
        )
        .unwrap();
        let (logits, acts) = model.capture_activations(&t(&[1, 1, 1, 1], vec![3.0])).unwrap();
        assert_eq!(acts.layers()[0].data(), &[6.0]);
        assert_eq!(logits.data(), &[6.0]);
    }

    #[test]
    fn alexnet_capture_shapes() {
        let model = Architecture::AlexNet32.build((3, 32, 32), 10, 0).unwrap();
        let expect = [(64, 8, 8), (192, 4, 4), (384, 2, 2), (256, 2, 2), (256, 2, 2)];
        let specs: Vec<_> = model.layer_specs().iter().map(|s| (s.channels, s.height, s.width)).collect();
        assert_eq!(specs, expect);
        let (logits, acts) = model.capture_activations(&random_images(2, 2, (3, 32, 32))).unwrap();
        assert_eq!(logits.shape(), &[2, 10]);
        assert_eq!(acts.num_layers(), 5);
        assert_eq!(acts.layers()[0].shape(), &[2, 64, 8, 8]);
    }

    #[test]
    fn vgg_capture_shapes() {
        let model = Architecture::Vgg11Bn32.build((3, 32, 32), 10, 0).unwrap();
        let sides: Vec<_> = model.layer_specs().iter().map(|s| (s.channels, s.height)).collect();
        assert_eq!(sides, [(64, 32), (128, 16), (256, 8), (256, 8), (512, 4), (512, 4), (512, 2), (512, 2)]);
    }

    #[test]
    fn rejects_bad_inputs_and_configs() {
        let model = Architecture::Toy3.build((3, 16, 16), 2, 0).unwrap();
        assert!(matches!(model.forward(&random_images(0, 1, (3, 8, 8))), Err(crate::Error::Shape(_))));
        let no_capture = TargetModel::new(
            "dense",
            (1, 1, 1),
            vec![Layer::Flatten, Layer::Linear(LinearLayer { weight: t(&[1, 1], vec![1.0]), bias: None }), Layer::Relu],
        );
        assert!(matches!(no_capture, Err(crate::Error::Config(_))));
        let wrong_mask = PathwayMask::ones(&[LayerSpec::new(1, 1, 1)]);
        assert!(model.masked_forward(&random_images(0, 1, (3, 16, 16)), &[wrong_mask]).is_err());
    }

    #[test]
    fn identity_and_annihilating_masks() {
        let model = Architecture::Toy3.build((3, 16, 16), 3, 11).unwrap();
        let x = random_images(3, 4, (3, 16, 16));
        let (logits, _) = model.capture_activations(&x).unwrap();
        let ones = PathwayMask::ones(model.layer_specs());
        assert_eq!(model.masked_forward(&x, &[ones]).unwrap(), logits);

        let zeros = PathwayMask::zeros(model.layer_specs());
        let masked = model.masked_forward(&x, &[zeros]).unwrap();
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let out = model.run(&tape, &bound, xv, 0, 0, &mut |_, a| tape.scale(a, 0.0));
        assert_eq!(*tape.value(out), masked);
    }

    #[test]
    fn two_neuron_hand_calculation() {
        let model = two_neuron_model();
        let x = t(&[1, 1, 1, 1], vec![2.0]);
        // activations (3, 2): logits (3 + 4 + 0.5, 9 - 2)
        assert_eq!(model.forward(&x).unwrap().data(), &[7.5, 7.0]);
        let keep_first = PathwayMask::from_bits(model.layer_specs(), &[true, false]).unwrap();
        // activations (3, 0): logits (3.5, 9)
        assert_eq!(model.masked_forward(&x, &[keep_first]).unwrap().data(), &[3.5, 9.0]);
    }

    #[test]
    fn masked_gradient_basics() {
        let model = Architecture::Toy3.build((3, 16, 16), 2, 5).unwrap();
        let x = random_images(9, 2, (3, 16, 16));
        let specs = model.layer_specs().to_vec();
        let ones = PathwayMask::ones(&specs);
        let g1 = model.masked_gradients(&x, &[ones], &[0, 1]).unwrap();

        // plain gradient through an unmasked tape
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let xv = tape.param(x.clone());
        let out = model.run(&tape, &bound, xv, 0, 0, &mut |_, a| a);
        let picked = tape.gather(out, &[0, 1]);
        let total = tape.sum(picked);
        let grads = tape.backward(total);
        assert!(grads.get(xv).unwrap().max_abs_diff(&g1.input_grad) < 1e-12);

        let mut layers = ones_layers(&specs);
        layers[0] = Tensor::zeros(&specs[0].dims());
        let cut = PathwayMask::from_layers(layers).unwrap();
        let g0 = model.masked_gradients(&x, &[cut], &[0, 1]).unwrap();
        assert!(g0.input_grad.data().iter().all(|&v| v == 0.0));

        let relaxed = PathwayMask::from_layers(specs.iter().map(|s| Tensor::full(&s.dims(), 0.5)).collect()).unwrap();
        assert!(matches!(model.masked_gradients(&x, &[relaxed], &[0, 0]), Err(crate::Error::Mask(_))));
        assert!(model.masked_gradients(&x, &[PathwayMask::ones(&specs)], &[0, 2]).is_err());
    }

    fn ones_layers(specs: &[LayerSpec]) -> Vec<Tensor> {
        specs.iter().map(|s| Tensor::ones(&s.dims())).collect()
    }

    fn random_mask(specs: &[LayerSpec], rng: &mut ChaCha8Rng, keep: f64) -> PathwayMask {
        let total: usize = specs.iter().map(LayerSpec::len).sum();
        let bits: Vec<bool> = (0..total).map(|_| rng.gen_bool(keep)).collect();
        PathwayMask::from_bits(specs, &bits).unwrap()
    }

    #[test]
    fn gradients_vanish_at_masked_positions() {
        let model = Architecture::Toy3.build((3, 16, 16), 2, 8).unwrap();
        let x = random_images(4, 2, (3, 16, 16));
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let masks = vec![random_mask(model.layer_specs(), &mut rng, 0.6), random_mask(model.layer_specs(), &mut rng, 0.3)];
        let g = model.masked_gradients(&x, &masks, &[1, 0]).unwrap();
        for (layer, grads) in g.layer_grads.iter().enumerate() {
            for s in 0..2 {
                let m = &masks[s].layers()[layer];
                let gs = grads.index_outer(s);
                for (mv, gv) in m.data().iter().zip(gs.data()) {
                    if *mv == 0.0 {
                        assert_eq!(*gv, 0.0);
                    }
                }
            }
        }
    }

    fn masked_logit(model: &TargetModel, x: &Tensor, mask: &PathwayMask, class: usize) -> f64 {
        model.masked_forward(x, std::slice::from_ref(mask)).unwrap().data()[class]
    }

    #[test]
    fn input_gradient_matches_central_differences() {
        // three conv stages; central differences on the masked class logit
        let model = Architecture::Toy3.build((3, 8, 8), 2, 21).unwrap();
        let x = random_images(5, 1, (3, 8, 8));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask = random_mask(model.layer_specs(), &mut rng, 0.7);
        let g = model.masked_gradients(&x, std::slice::from_ref(&mask), &[1]).unwrap();
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (masked_logit(&model, &xp, &mask, 1) - masked_logit(&model, &xm, &mask, 1)) / (2.0 * h);
            worst = worst.max((fd - g.input_grad.data()[i]).abs());
        }
        assert!(worst <= 1e-3, "max abs deviation {worst}");
    }

    #[test]
    fn single_kept_neuron_chain_rule() {
        // relu(w * x + b) kept at neuron 0 only: d logit_0 / dx = W[0][0] * w0
        let model = two_neuron_model();
        let x = t(&[1, 1, 1, 1], vec![2.0]);
        let mask = PathwayMask::from_bits(model.layer_specs(), &[true, false]).unwrap();
        let g = model.masked_gradients(&x, std::slice::from_ref(&mask), &[0]).unwrap();
        assert!((g.input_grad.data()[0] - 1.0 * 1.5).abs() < 1e-12);
        let h = 1e-4;
        let fd = (masked_logit(&model, &t(&[1, 1, 1, 1], vec![2.0 + h]), &mask, 0)
            - masked_logit(&model, &t(&[1, 1, 1, 1], vec![2.0 - h]), &mask, 0))
            / (2.0 * h);
        assert!((fd - g.input_grad.data()[0]).abs() < 1e-6);
    }

    #[test]
    fn masking_is_idempotent_and_monotone() {
        let model = Architecture::Toy3.build((3, 16, 16), 2, 4).unwrap();
        let x = random_images(6, 1, (3, 16, 16));
        let (_, acts) = model.capture_activations(&x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let q = random_mask(model.layer_specs(), &mut rng, 0.7);
        // p is a subset of q
        let p_bits: Vec<bool> = q.bits().into_iter().map(|b| b && rng.gen_bool(0.5)).collect();
        let p = PathwayMask::from_bits(model.layer_specs(), &p_bits).unwrap();
        let a0 = acts.layers()[0].index_outer(0);
        let once = a0.zip_map(&p.layers()[0], |a, m| a * m).unwrap();
        let twice = once.zip_map(&p.layers()[0], |a, m| a * m).unwrap();
        assert_eq!(once, twice);
        let under_q = a0.zip_map(&q.layers()[0], |a, m| a * m).unwrap();
        for (a, b) in once.data().iter().zip(under_q.data()) {
            assert!(*a == 0.0 || *a == *b);
        }
    }

    #[test]
    fn concurrent_forwards_agree() {
        let model = Architecture::Toy3.build((3, 16, 16), 2, 1).unwrap();
        let x = random_images(8, 2, (3, 16, 16));
        let expect = model.forward(&x).unwrap();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..4).map(|_| s.spawn(|| model.forward(&x).unwrap())).collect();
            for h in handles {
                assert_eq!(h.join().unwrap(), expect);
            }
        });
    }

    #[test]
    fn downstream_injection_reproduces_logits() {
        let model = Architecture::Toy3.build((3, 16, 16), 2, 2).unwrap();
        let x = random_images(10, 2, (3, 16, 16));
        let (logits, acts) = model.capture_activations(&x).unwrap();
        for idx in 0..3 {
            let (vals, _) = model.downstream_gradients(idx, &acts.layers()[idx], &[0, 1]).unwrap();
            assert!((vals[0] - logits.data()[0]).abs() < 1e-12);
            assert!((vals[1] - logits.data()[3]).abs() < 1e-12);
        }
    }
}
