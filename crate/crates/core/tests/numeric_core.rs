use exitbench_core::tensor::{grad_check, LayerSpec, Objective, Sequential, SequentialObjective, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn objective(seed: u64, specs: &[LayerSpec], input_shape: &[usize], classes: usize) -> SequentialObjective {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Sequential::from_specs(specs, &mut rng);
    let input = Tensor::from_fn(input_shape, |_| rng.random_range(-1.0..1.0));
    let labels = (0..input_shape[0]).map(|_| rng.random_range(0..classes)).collect();
    SequentialObjective { net, input, labels }
}

fn conv(i: usize, o: usize, stride: usize, padding: usize) -> LayerSpec {
    LayerSpec::Conv2d { in_channels: i, out_channels: o, kernel: 3, stride, padding }
}

fn assert_passes(name: &str, obj: &mut SequentialObjective) {
    let report = grad_check(obj, &[], 1e-4).unwrap();
    assert!(report.checked > 0);
    assert!(
        report.passed(),
        "{name}: max rel error {:.3e}, violations {:?}",
        report.max_rel_error,
        &report.violations[..report.violations.len().min(5)]
    );
}

#[test]
fn conv_batchnorm_stack_in_train_mode() {
    let mut obj = objective(
        1,
        &[
            conv(2, 3, 1, 1),
            LayerSpec::BatchNorm2d { channels: 3 },
            LayerSpec::Relu,
            conv(3, 2, 2, 0),
            LayerSpec::Flatten,
            LayerSpec::Linear { in_features: 2 * 2 * 2, out_features: 4 },
        ],
        &[3, 2, 6, 6],
        4,
    );
    assert_passes("conv+bn", &mut obj);
}

#[test]
fn pooling_layers() {
    let mut obj = objective(
        2,
        &[
            LayerSpec::MaxPool2d { window: 2, stride: 2 },
            LayerSpec::AvgPool2d { window: 2, stride: 1 },
            LayerSpec::Flatten,
            LayerSpec::Linear { in_features: 2 * 3 * 3, out_features: 3 },
        ],
        &[2, 2, 8, 8],
        3,
    );
    assert_passes("pooling", &mut obj);
}

#[test]
fn residual_block() {
    let mut obj = objective(
        3,
        &[
            LayerSpec::ResidualBlock { channels: 2 },
            LayerSpec::Flatten,
            LayerSpec::Linear { in_features: 2 * 4 * 4, out_features: 3 },
        ],
        &[3, 2, 4, 4],
        3,
    );
    assert_passes("residual", &mut obj);
}

#[test]
fn batchnorm_on_identical_samples_has_zero_scale_gradient() {
    let mut obj = objective(
        4,
        &[
            LayerSpec::BatchNorm2d { channels: 2 },
            LayerSpec::Flatten,
            LayerSpec::Linear { in_features: 2 * 3 * 3, out_features: 3 },
        ],
        &[4, 2, 3, 3],
        3,
    );
    // every sample and position carries the same value per channel
    let n = obj.input.len();
    obj.input = Tensor::from_fn(obj.input.shape(), |i| if (i / 9) % 2 == 0 { 0.7 } else { -0.2 });
    assert_eq!(obj.input.len(), n);
    let (_, grads) = obj.loss_and_grads().unwrap();
    assert!(grads[0].data().iter().all(|g| g.abs() < 1e-12), "{:?}", grads[0]);
    // input gradient is skipped: with zero variance the loss does not depend
    // on the input at all, and epsilon dominates the normaliser
    let frozen = [obj.num_params() - 1];
    let report = grad_check(&mut obj, &frozen, 1e-4).unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn f32_linear_matches_naive_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let net = Sequential::<f64>::from_specs(&[LayerSpec::Linear { in_features: 13, out_features: 5 }], &mut rng);
    let x = Tensor::<f64>::from_fn(&[4, 13], |_| rng.random_range(-1.0..1.0));
    let exitbench_core::tensor::Layer::Linear(lin) = &net.layers[0] else { unreachable!() };
    let mut expected = vec![0.0; 20];
    for n in 0..4 {
        for o in 0..5 {
            let mut s = lin.bias.data()[o];
            for i in 0..13 {
                s += x.data()[n * 13 + i] * lin.weight.data()[o * 13 + i];
            }
            expected[n * 5 + o] = s;
        }
    }
    let got = net.cast::<f32>().forward_eval(&x.cast()).unwrap();
    for (a, b) in got.data().iter().zip(&expected) {
        assert!(((*a as f64) - b).abs() <= 1e-5 * b.abs().max(1.0));
    }
}

#[test]
fn eval_forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let net = Sequential::<f32>::from_specs(
        &[conv(3, 4, 1, 1), LayerSpec::BatchNorm2d { channels: 4 }, LayerSpec::Relu, LayerSpec::ResidualBlock { channels: 4 }],
        &mut rng,
    );
    let x = Tensor::<f32>::from_fn(&[2, 3, 8, 8], |_| rng.random_range(0.0..1.0));
    let a = net.forward_eval(&x).unwrap();
    let b = net.forward_eval(&x).unwrap();
    assert_eq!(a.data(), b.data());
    assert!(a.all_finite());
}
