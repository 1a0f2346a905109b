mod common;

use common::*;
use deco_core::buffer::{initialize_buffer, InitMode};
use deco_core::condense::{
    condense_full_bilevel, condense_segment, contrastive_loss_and_grad, distance_grad_wrt_gsyn, exact_match_gradient,
    fd_match_gradient, matching_distance, DistanceMetric, EpsilonRule, MatchConfig, Variant,
};
use deco_core::data::synthetic_blob_dataset;
use deco_core::orchestrator::{evaluate, run_experiment, train_model, ModelOptimizer};
use deco_core::{ClassifierModel, GradientVector, Normalization, Shape, WeightedBatch};
use deco_oracle::{cosine_distance, cosine_distance_grad_fd, ContrastiveProblem, MatchingProblem};
use proptest::prelude::*;

fn groups(flat: &[f64], split: usize) -> GradientVector<f64> {
    GradientVector::new(vec![flat[..split].to_vec(), flat[split..].to_vec()])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distance_and_gradient_match_oracle(
        a in prop::collection::vec(-3.0f64..3.0, 5),
        b in prop::collection::vec(-3.0f64..3.0, 5),
        split in 1usize..4,
    ) {
        prop_assume!(a[..split].iter().any(|v| v.abs() > 0.1) && a[split..].iter().any(|v| v.abs() > 0.1));
        prop_assume!(b[..split].iter().any(|v| v.abs() > 0.1) && b[split..].iter().any(|v| v.abs() > 0.1));
        let (s, r) = (groups(&a, split), groups(&b, split));
        let d = matching_distance(&s, &r).unwrap();
        let want = cosine_distance(s.groups(), r.groups());
        prop_assert!((d - want).abs() <= 1e-12 * want.max(1.0));
        let g = distance_grad_wrt_gsyn(&s, &r).unwrap().flatten();
        let fd = cosine_distance_grad_fd(s.groups(), r.groups(), 1e-6).concat();
        prop_assert!(rel_err(&g, &fd, 1e-9) < 1e-6);
    }

    #[test]
    fn gradient_ignores_positive_rescaling_of_real_side(
        a in prop::collection::vec(0.5f64..3.0, 5),
        b in prop::collection::vec(-3.0f64..3.0, 5),
        k in 0.01f64..100.0,
    ) {
        prop_assume!(b.iter().any(|v| v.abs() > 0.1));
        let s = GradientVector::new(vec![a]);
        let r = GradientVector::new(vec![b.clone()]);
        let scaled = GradientVector::new(vec![b.iter().map(|v| v * k).collect()]);
        let g = distance_grad_wrt_gsyn(&s, &r).unwrap().flatten();
        let gk = distance_grad_wrt_gsyn(&s, &scaled).unwrap().flatten();
        let fd = cosine_distance_grad_fd(s.groups(), scaled.groups(), 1e-6).concat();
        prop_assert!(rel_err(&gk, &g, 1e-12) < 1e-9);
        prop_assert!(rel_err(&gk, &fd, 1e-9) < 1e-6);
    }
}

fn matching_case(
    seed: u64,
    ipc: usize,
    real_n: usize,
) -> (ClassifierModel<f64>, WeightedBatch<f64>, WeightedBatch<f64>) {
    let theta = tanh_mlp(4, &[6], 3, seed);
    let syn_labels: Vec<usize> = (0..3).flat_map(|c| vec![c; ipc]).collect();
    let syn =
        WeightedBatch::unweighted(gaussian_images(Shape::flat(4), syn_labels.len(), seed + 500), syn_labels).unwrap();
    (theta, syn, random_batch(4, real_n, 3, seed + 900))
}

fn oracle_grad(theta: &ClassifierModel<f64>, syn: &WeightedBatch<f64>, real: &WeightedBatch<f64>) -> Vec<f64> {
    let oracle = oracle_of(theta);
    let real_rows = rows(&real.images);
    let problem = MatchingProblem {
        model: &oracle,
        syn_labels: &syn.labels,
        real: &real_rows,
        real_labels: &real.labels,
        real_weights: &real.weights,
    };
    problem.distance_grad_fd(&rows(&syn.images), 1e-5).concat()
}

#[test]
fn fd_gradient_aligns_with_second_order_oracle_on_tiny_mlp() {
    for seed in 0..5 {
        let (theta, syn, real) = matching_case(seed, 1, 4);
        assert!(theta.param_count() < 200);
        let step = fd_match_gradient(&theta, &syn, &real, DistanceMetric::Cosine, EpsilonRule::default()).unwrap();
        let c = cosine(step.grad.as_slice(), &oracle_grad(&theta, &syn, &real));
        assert!(c > 0.99, "seed {seed}: cosine {c}");
    }
}

#[test]
fn exact_gradient_matches_oracle_to_tight_tolerance() {
    for seed in 0..4 {
        let (theta, syn, real) = matching_case(seed, 2, 6);
        let step = exact_match_gradient(&theta, &syn, &real, DistanceMetric::Cosine).unwrap();
        let err = rel_err(step.grad.as_slice(), &oracle_grad(&theta, &syn, &real), 1e-9);
        assert!(err < 1e-6, "seed {seed}: relative error {err}");
    }
}

#[test]
fn epsilon_times_direction_norm_is_one_hundredth() {
    let (theta, syn, real) = matching_case(3, 1, 4);
    let step = fd_match_gradient(&theta, &syn, &real, DistanceMetric::Cosine, EpsilonRule::default()).unwrap();
    let g_syn = theta.param_gradients(&syn).unwrap();
    let v = distance_grad_wrt_gsyn(&g_syn, &theta.param_gradients(&real).unwrap()).unwrap();
    assert!((step.epsilon.unwrap() * v.norm() - 0.01).abs() < 1e-15);
}

fn contrastive_check(normalize: bool, seed: u64) {
    let s = scene(3, 3, 4, seed);
    let anchors: Vec<usize> = vec![0, 2, 4, 6, 7];
    let out = contrastive_loss_and_grad(&s.deployed, &s.buffer, &anchors, 0.5, normalize, seed).unwrap();
    let idx = out.indexing.expect("indexing for a non-trivial call");
    let oracle = oracle_of(&s.deployed);
    let problem = ContrastiveProblem {
        model: &oracle,
        anchors: &idx.anchors,
        positives: &idx.positives,
        negatives: &idx.negatives,
        tau: 0.5,
        normalize,
    };
    let images = rows(s.buffer.images());
    let want = problem.loss(&images);
    assert!((out.loss - want).abs() <= 1e-9 * want.abs().max(1.0), "{} vs {want}", out.loss);
    let fd = problem.anchor_grad_fd(&images, 1e-5).concat();
    assert!(rel_err(out.grad.as_slice(), &fd, 1e-9) < 1e-6);
    for (k, &i) in idx.anchors.iter().enumerate() {
        let y = s.buffer.labels()[i];
        assert_ne!(idx.negative_class[k], y);
        assert!(idx.negatives[k].iter().all(|&n| s.buffer.labels()[n] == idx.negative_class[k]));
        assert!(idx.positives[k].iter().all(|&p| p != i && s.buffer.labels()[p] == y));
    }
}

#[test]
fn contrastive_matches_direct_evaluation() {
    for seed in 0..3 {
        contrastive_check(false, seed);
        contrastive_check(true, seed);
    }
}

#[test]
fn contrastive_loss_tends_to_log_negatives_as_temperature_grows() {
    let s = scene(3, 4, 4, 1);
    let anchors: Vec<usize> = (0..s.buffer.len()).collect();
    let out = contrastive_loss_and_grad(&s.deployed, &s.buffer, &anchors, 1e9, false, 0).unwrap();
    let want = anchors.len() as f64 * 4f64.ln();
    assert!((out.loss - want).abs() < 1e-6);
}

#[test]
fn bilevel_with_single_inner_step_agrees_with_one_step_update() {
    for seed in 0..3 {
        let s = scene(3, 2, 4, seed);
        let active = active_window(&s, &[0, 2], 6);
        let base = MatchConfig { iterations: 1, alpha: 0.0, ..Default::default() };
        let mut one_step = s.buffer.clone();
        condense_segment(&mut one_step, &active, &s.deployed, &base, seed, 0).unwrap();
        let full = MatchConfig { variant: Variant::DecoFull, inner_epochs: 1, ..base };
        let mut bilevel = s.buffer.clone();
        condense_full_bilevel(&mut bilevel, &active, &s.deployed, &full, seed, 0).unwrap();
        let delta = |b: &deco_core::CondensedBuffer<f64>| -> Vec<f64> {
            b.images().as_slice().iter().zip(s.buffer.images().as_slice()).map(|(a, o)| a - o).collect()
        };
        let c = cosine(&delta(&one_step), &delta(&bilevel));
        assert!(c > 0.99, "seed {seed}: cosine {c}");
    }
}

#[test]
fn distance_falls_within_segments_on_blobs() {
    let drops: Vec<(f64, f64)> = (0..5)
        .map(|seed| {
            let mut cfg = quick_config(seed);
            cfg.set("iterations", "10").unwrap();
            let out = run_experiment::<f64>(&cfg).unwrap();
            let rows: Vec<_> = out.metrics.condense.iter().filter(|r| r.segment < 10).collect();
            let at =
                |it: usize| mean(&rows.iter().filter(|r| r.iteration == it).map(|r| r.distance).collect::<Vec<_>>());
            (at(0), at(9))
        })
        .collect();
    let first = mean(&drops.iter().map(|d| d.0).collect::<Vec<_>>());
    let last = mean(&drops.iter().map(|d| d.1).collect::<Vec<_>>());
    assert!(last < first, "first {first}, last {last}");
}

#[test]
fn offline_condensation_beats_real_samples_for_fresh_models() {
    let opt = ModelOptimizer { lr: 0.01, ..Default::default() };
    let mut gains = Vec::new();
    for seed in 0..5 {
        let all = synthetic_blob_dataset::<f64>(4, 300, Shape::flat(16), 3.0, seed).unwrap();
        let (train, test) = all.stratified_split(0.5, seed).unwrap();
        let norm = Normalization::identity(1);
        let cfg = deco_core::ExperimentConfig::default();
        let arch = cfg.architecture(train.shape(), train.classes);
        let accuracy = |mode: &InitMode| {
            let buf = initialize_buffer(&train, 1, mode, norm.clone(), seed).unwrap();
            let (x, y) = buf.as_training_set();
            let fresh = ClassifierModel::<f64>::reinitialize(&arch, seed + 77).unwrap();
            let (m, _) = train_model(&fresh, &WeightedBatch::unweighted(x, y).unwrap(), 100, &opt, seed).unwrap();
            evaluate(&m, &test).unwrap()
        };
        let condensed = accuracy(&InitMode::condense_offline(arch.clone()));
        let real = accuracy(&InitMode::RealSample);
        gains.push(condensed - real);
    }
    assert!(mean(&gains) > 0.0, "{gains:?}");
}

#[test]
fn contrastive_term_lowers_class_impurity() {
    let mut drops = Vec::new();
    for seed in 0..5 {
        let s = scene(3, 4, 4, seed);
        let active = active_window(&s, &[0, 1, 2], 10);
        let cfg = MatchConfig { iterations: 20, alpha: 1.0, ..Default::default() };
        let mut buffer = s.buffer.clone();
        let slots = active.active_synthetic_indices.clone();
        let before = contrastive_loss_and_grad(&s.deployed, &buffer, &slots, cfg.tau, false, 99).unwrap().loss;
        condense_segment(&mut buffer, &active, &s.deployed, &cfg, seed, 0).unwrap();
        let after = contrastive_loss_and_grad(&s.deployed, &buffer, &slots, cfg.tau, false, 99).unwrap().loss;
        drops.push(before - after);
    }
    assert!(median(drops.clone()) > 0.0, "{drops:?}");
}
