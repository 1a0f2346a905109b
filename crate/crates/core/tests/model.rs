mod common;

use common::*;
use deco_core::model::Activation;
use deco_core::orchestrator::{train_model, ModelOptimizer};
use deco_core::{Architecture, ClassifierModel, ImageBatch, Shape, WeightedBatch};
use deco_oracle::{central_fd, regroup, OracleMlp};
use proptest::prelude::*;

#[test]
fn forward_matches_explicit_matrix_arithmetic() {
    let model = tanh_mlp(3, &[4], 3, 11);
    let oracle = oracle_of(&model);
    let images = gaussian_images(Shape::flat(3), 5, 2);
    let probs = model.forward(&images).unwrap();
    for (x, row) in images.iter().zip(probs.iter_rows()) {
        let z = oracle.logits(x);
        let total: f64 = z.iter().map(|v| v.exp()).sum();
        for (p, zc) in row.iter().zip(&z) {
            assert!((p - zc.exp() / total).abs() < 1e-12);
        }
    }
}

#[test]
fn weights_two_zero_double_first_sample_loss() {
    let model = tanh_mlp(4, &[5], 3, 3);
    let images = gaussian_images(Shape::flat(4), 2, 8);
    let pair = WeightedBatch::new(images.clone(), vec![2, 0], vec![2.0, 0.0]).unwrap();
    let single = WeightedBatch::unweighted(images.select(&[0]), vec![2]).unwrap();
    let a = model.weighted_ce_loss(&pair).unwrap();
    let b = oracle_of(&model).weighted_ce(&[images.image(0).to_vec()], &[2], &[1.0]);
    assert!((a - 2.0 * b).abs() <= 1e-12 * b.abs());
    assert_eq!(a, 2.0 * model.weighted_ce_loss(&single).unwrap());
}

#[test]
fn logistic_param_gradient_matches_central_differences() {
    let arch = Architecture::linear(Shape::flat(1), 2);
    let model = ClassifierModel::<f64>::reinitialize(&arch, 4).unwrap();
    let batch = WeightedBatch::new(
        ImageBatch::new(Shape::flat(1), vec![0.7, -1.3, 2.1]).unwrap(),
        vec![0, 1, 1],
        vec![1.0, 0.5, 2.0],
    )
    .unwrap();
    let g = model.param_gradients(&batch).unwrap().flatten();
    let sizes = model.group_sizes();
    let fd = central_fd(&model.params().concat(), 1e-5, |p| {
        ClassifierModel::from_params(arch.clone(), regroup(p, &sizes)).unwrap().weighted_ce_loss(&batch).unwrap()
    });
    assert!(rel_err(&g, &fd, 1e-12) < 1e-4);
}

#[test]
fn four_pixel_input_gradient_matches_central_differences() {
    let arch = Architecture::mlp(4, &[3], 2, Activation::Tanh);
    let model = ClassifierModel::<f64>::reinitialize(&arch, 6).unwrap();
    let images = gaussian_images(Shape::flat(4), 3, 1);
    let batch = WeightedBatch::new(images.clone(), vec![0, 1, 0], vec![0.3, 1.0, 0.8]).unwrap();
    let g = model.input_gradients(&batch).unwrap();
    assert_eq!(g.shape(), images.shape());
    assert_eq!(g.len(), images.len());
    let fd = central_fd(images.as_slice(), 1e-5, |p| {
        let b = WeightedBatch::new(
            ImageBatch::new(Shape::flat(4), p.to_vec()).unwrap(),
            batch.labels.clone(),
            batch.weights.clone(),
        )
        .unwrap();
        model.weighted_ce_loss(&b).unwrap()
    });
    for (a, b) in g.as_slice().iter().zip(&fd) {
        assert!((a - b).abs() <= 1e-4 * b.abs().max(1e-3), "{a} vs {b}");
    }
}

#[test]
fn initial_weights_have_zero_mean_within_three_sigma() {
    let arch = Architecture::linear(Shape::flat(6), 4);
    let bound = (6.0f64 / 6.0).sqrt();
    let sigma = bound / 3f64.sqrt();
    let mut samples = Vec::new();
    for seed in 0..10_000u64 {
        let m = ClassifierModel::<f64>::reinitialize(&arch, seed).unwrap();
        samples.push(m.params()[0][0]);
        assert!(m.params()[0][..24].iter().all(|w| w.abs() <= bound));
        assert!(m.params()[0][24..].iter().all(|&b| b == 0.0));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    assert!(mean.abs() < 3.0 * sigma / n.sqrt(), "mean {mean}");
    let var = samples.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((var.sqrt() - sigma).abs() < 0.05 * sigma);
}

#[test]
fn zero_epochs_leave_model_bit_identical() {
    let model = tanh_mlp(4, &[6], 3, 9);
    let batch = random_batch(4, 10, 3, 5);
    let (trained, history) = train_model(&model, &batch, 0, &ModelOptimizer::default(), 1).unwrap();
    assert!(history.is_empty());
    assert_eq!(trained.params(), model.params());
}

#[test]
fn training_loss_is_non_increasing_on_average() {
    let opt = ModelOptimizer { lr: 0.05, ..Default::default() };
    let slopes: Vec<f64> = (0..5)
        .map(|seed| {
            let model = tanh_mlp(5, &[8], 3, seed);
            let batch = random_batch(5, 30, 3, 100 + seed);
            let (_, h) = train_model(&model, &batch, 40, &opt, seed).unwrap();
            let steps: Vec<f64> = h.windows(2).map(|w| w[1] - w[0]).collect();
            mean(&steps)
        })
        .collect();
    assert!(median(slopes.clone()) <= 0.0, "{slopes:?}");
}

#[test]
fn training_is_seed_deterministic() {
    let model = tanh_mlp(5, &[8], 3, 2);
    let batch = random_batch(5, 40, 3, 7);
    let opt = ModelOptimizer { batch_size: 8, ..Default::default() };
    let a = train_model(&model, &batch, 3, &opt, 42).unwrap();
    let b = train_model(&model, &batch, 3, &opt, 42).unwrap();
    assert_eq!(a.0.params(), b.0.params());
    assert_eq!(a.1, b.1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn loss_and_param_gradient_match_oracle(
        seed in 0u64..1000,
        hidden in 1usize..6,
        n in 1usize..8,
        relu in any::<bool>(),
    ) {
        let act = if relu { Activation::Relu } else { Activation::Tanh };
        let model = ClassifierModel::<f64>::reinitialize(&Architecture::mlp(4, &[hidden], 3, act), seed).unwrap();
        let batch = random_batch(4, n, 3, seed);
        let oracle: OracleMlp = oracle_of(&model);
        let xs = rows(&batch.images);
        let want = oracle.weighted_ce(&xs, &batch.labels, &batch.weights);
        let (loss, g) = model.loss_and_param_gradients(&batch).unwrap();
        prop_assert!((loss - want).abs() <= 1e-9 * want.abs().max(1e-9));
        let og = oracle.param_gradient(&xs, &batch.labels, &batch.weights).concat();
        prop_assert!(rel_err(&g.flatten(), &og, 1e-12) < 1e-9);
    }

    #[test]
    fn features_match_oracle_encoder(seed in 0u64..1000, n in 1usize..5) {
        let model = tanh_mlp(3, &[4], 2, seed);
        let images = gaussian_images(Shape::flat(3), n, seed);
        let f = model.encode(&images).unwrap();
        let oracle = oracle_of(&model);
        for (x, row) in images.iter().zip(f.iter_rows()) {
            prop_assert!(rel_err(row, &oracle.features(x), 1e-12) < 1e-12);
        }
    }
}
