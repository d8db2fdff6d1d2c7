use exitbench_core::corrupt::{corrupt, corrupt_dataset, CorruptionKind, CorruptionSpec};
use exitbench_core::data::{gen_minishapes, Dataset};
use exitbench_core::knn::FlatIndex;
use exitbench_core::net::{
    BackboneKind, BatchLoss, JointCrossEntropy, ModelSpec, MultiExitModel, StepContext,
};
use exitbench_core::robust::{adapt_batchnorm, augmix_sample, AdaptConfig, AugMixConfig, AugMixLoss};
use exitbench_core::seed;
use exitbench_core::trace::{read_traces, write_traces, TraceHeader, TraceRecord};
use proptest::prelude::*;
use rand::Rng;

const SHAPE: [usize; 3] = [3, 32, 32];

fn shapes(n: usize) -> Dataset {
    gen_minishapes(5, n, 10).unwrap()
}

fn small_model() -> MultiExitModel<f32> {
    let spec = ModelSpec::reference(BackboneKind::Convnet8, [4, 4, 8], 32, 10).unwrap();
    MultiExitModel::build(&spec, 9).unwrap()
}

fn mean_abs_change(clean: &Dataset, spec: CorruptionSpec) -> f64 {
    let out = corrupt_dataset(clean, &[spec], 13).unwrap();
    let total: f64 = clean
        .images
        .iter()
        .zip(&out.images)
        .map(|(a, b)| (a - b).abs() as f64)
        .sum();
    total / clean.images.len() as f64
}

#[test]
fn corruption_damage_grows_with_severity() {
    let clean = shapes(24);
    for kind in CorruptionKind::ALL {
        let damage: Vec<f64> = (1..=5)
            .map(|s| mean_abs_change(&clean, CorruptionSpec::new(kind, s).unwrap()))
            .collect();
        assert!(damage[0] > 0.0, "{kind:?} leaves images unchanged");
        for w in damage.windows(2) {
            assert!(w[0] <= w[1], "{kind:?}: {damage:?}");
        }
    }
}

#[test]
fn noise_distortion_is_monotone_over_many_images() {
    let clean = gen_minishapes(17, 1000, 10).unwrap();
    for kind in CorruptionKind::ALL.into_iter().filter(|k| k.is_noise()) {
        let l2: Vec<f64> = (1..=5)
            .map(|s| {
                let out = corrupt_dataset(&clean, &[CorruptionSpec::new(kind, s).unwrap()], 3).unwrap();
                let sq: f64 = clean
                    .images
                    .iter()
                    .zip(&out.images)
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum();
                (sq / clean.len() as f64).sqrt()
            })
            .collect();
        for w in l2.windows(2) {
            assert!(w[0] <= w[1], "{kind:?}: {l2:?}");
        }
    }
}

#[test]
fn gaussian_noise_is_centred() {
    let grey = vec![0.5f32; 3 * 32 * 32];
    let mut total = 0.0f64;
    let mut count = 0usize;
    for s in 0..40u64 {
        let out = corrupt(&grey, SHAPE, CorruptionSpec::new(CorruptionKind::GaussianNoise, 2).unwrap(), s).unwrap();
        total += out.iter().map(|v| *v as f64 - 0.5).sum::<f64>();
        count += out.len();
    }
    assert!((total / count as f64).abs() < 0.005);
}

#[test]
fn corrupted_dataset_records_its_tags() {
    let clean = shapes(6);
    let specs = [
        CorruptionSpec::new(CorruptionKind::Contrast, 2).unwrap(),
        CorruptionSpec::new(CorruptionKind::ImpulseNoise, 4).unwrap(),
    ];
    let out = corrupt_dataset(&clean, &specs, 1).unwrap();
    assert_eq!(out.corruptions.len(), 2);
    assert_eq!(out.labels, clean.labels);
    assert_eq!(out.source_tag(), "contrast:2+impulse_noise:4");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn corruption_is_deterministic_and_in_range(
        kind in prop::sample::select(CorruptionKind::ALL.to_vec()),
        severity in 1u8..=5,
        seed in any::<u64>(),
        pixels in prop::collection::vec(0.0f32..=1.0, 3 * 8 * 8),
    ) {
        let spec = CorruptionSpec::new(kind, severity).unwrap();
        let a = corrupt(&pixels, [3, 8, 8], spec, seed).unwrap();
        let b = corrupt(&pixels, [3, 8, 8], spec, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len(), pixels.len());
        prop_assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn augmix_is_deterministic_and_in_range(seed in any::<u64>(), pixels in prop::collection::vec(0.0f32..=1.0, 3 * 8 * 8)) {
        let cfg = AugMixConfig::default();
        let a = augmix_sample(&pixels, [3, 8, 8], &cfg, &mut seed::rng(seed, &["view".into()]));
        let b = augmix_sample(&pixels, [3, 8, 8], &cfg, &mut seed::rng(seed, &["view".into()]));
        prop_assert_eq!(&a, &b);
        prop_assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn augmix_without_consistency_term_is_plain_cross_entropy() {
    let data = shapes(16);
    let idx: Vec<usize> = (0..16).collect();
    let images = data.batch(&idx);
    let labels: Vec<usize> = data.labels.iter().map(|&l| l as usize).collect();
    let mut m1 = small_model();
    let mut m2 = m1.clone();
    let weights = vec![0.5; m1.num_exits()];
    let ctx = || StepContext { epoch: 0, batch: 0, seed: 4 };
    let plain = JointCrossEntropy.step(&mut m1, &images, &labels, &weights, ctx()).unwrap();
    let mut aug = AugMixLoss {
        config: AugMixConfig { jsd_lambda: 0.0, ..AugMixConfig::default() },
        shape: SHAPE,
    };
    let mixed = aug.step(&mut m2, &images, &labels, &weights, ctx()).unwrap();
    assert_eq!(plain.loss, mixed.loss);
    for (a, b) in plain.grads.iter().zip(&mixed.grads) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn single_batch_adaptation_matches_batch_statistics() {
    let data = shapes(64);
    let model = small_model();
    let adapted = adapt_batchnorm(&model, &data, &AdaptConfig { batch_size: 64 }).unwrap();
    let idx: Vec<usize> = (0..64).collect();
    let x = data.batch(&idx);
    let (train_out, _) = adapted.clone().forward_train(&x).unwrap();
    let eval_out = adapted.forward_all_exits(&x).unwrap();
    for (t, e) in train_out.logits.iter().zip(&eval_out.logits) {
        for (a, b) in t.data().iter().zip(e.data()) {
            assert!((a - b).abs() <= 1e-3 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }
}

#[test]
fn adaptation_only_touches_running_statistics() {
    let data = shapes(50);
    let model = small_model();
    let adapted = adapt_batchnorm(&model, &data, &AdaptConfig { batch_size: 16 }).unwrap();
    for (a, b) in model.params().iter().zip(adapted.params()) {
        assert_eq!(a.data(), b.data());
    }
    let changed = model
        .batchnorms()
        .iter()
        .zip(adapted.batchnorms())
        .any(|(a, b)| a.running_mean != b.running_mean);
    assert!(changed);
    let again = adapt_batchnorm(&model, &data, &AdaptConfig { batch_size: 16 }).unwrap();
    for (a, b) in again.batchnorms().iter().zip(adapted.batchnorms()) {
        assert_eq!(a.running_mean, b.running_mean);
        assert_eq!(a.running_var, b.running_var);
    }
}

#[test]
fn repeated_batches_average_to_one_batch() {
    let half = shapes(20);
    let idx: Vec<usize> = (0..20).chain(0..20).collect();
    let doubled = half.subset(&idx, "doubled");
    let model = small_model();
    let cfg = AdaptConfig { batch_size: 20 };
    let once = adapt_batchnorm(&model, &half, &cfg).unwrap();
    let twice = adapt_batchnorm(&model, &doubled, &cfg).unwrap();
    for (a, b) in once.batchnorms().iter().zip(twice.batchnorms()) {
        assert_eq!(a.running_mean, b.running_mean);
        assert_eq!(a.running_var, b.running_var);
    }
}

#[test]
fn knn_matches_brute_force() {
    let mut rng = seed::rng(21, &["knn".into()]);
    let vectors: Vec<Vec<f32>> = (0..100)
        .map(|_| (0..16).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    let labels: Vec<u32> = (0..100).map(|i| i % 7).collect();
    let index = FlatIndex::build(&vectors, &labels).unwrap();
    let unit = |v: &[f32]| {
        let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        v.iter().map(|x| *x as f64 / n).collect::<Vec<f64>>()
    };
    for _ in 0..20 {
        let probe: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let p = unit(&probe);
        let mut expected: Vec<(f64, usize)> = vectors
            .iter()
            .enumerate()
            .map(|(i, v)| (unit(v).iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum(), i))
            .collect();
        expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let got = index.query(&probe, 10).unwrap();
        assert_eq!(got.len(), 10);
        for (g, (d, i)) in got.iter().zip(&expected) {
            assert_eq!(g.index, *i);
            assert!((g.distance - d).abs() < 1e-5);
        }
        let label = labels[expected[0].1];
        let agree = expected[..10].iter().filter(|(_, i)| labels[*i] == label).count() as f64 / 10.0;
        assert_eq!(index.agreement(&probe, 10, label).unwrap(), agree);
    }
}

#[test]
fn hundred_traces_round_trip() {
    let mut rng = seed::rng(2, &["traces".into()]);
    let header = TraceHeader::new(4, 5);
    let records: Vec<TraceRecord> = (0..100)
        .map(|i| TraceRecord {
            id: i,
            label: rng.random_range(0..5),
            logits: (0..4).map(|_| (0..5).map(|_| rng.random_range(-10.0f32..10.0)).collect()).collect(),
            repr: (i % 2 == 0).then(|| (0..4).map(|_| (0..3).map(|_| rng.random::<f32>()).collect()).collect()),
            cost: vec![0.1, 0.3, 0.6, 1.0],
            source: "gaussian_noise:3".into(),
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    write_traces(&path, &header, &records).unwrap();
    let (h, back) = read_traces(&path).unwrap();
    assert_eq!(h, header);
    assert_eq!(back, records);
}
