//! In-process checks of the core numerics against the brute-force oracles,
//! driven by `deco oracle-tests`.

use deco_core::buffer::{initialize_buffer, InitMode};
use deco_core::condense::{
    contrastive_loss_and_grad, distance_grad_wrt_gsyn, fd_match_gradient, matching_distance, DistanceMetric,
    EpsilonRule,
};
use deco_core::data::synthetic_blob_dataset;
use deco_core::model::{Activation, LayerSpec};
use deco_core::rng::rng;
use deco_core::{Architecture, ClassifierModel, GradientVector, ImageBatch, Normalization, Shape, WeightedBatch};
use deco_oracle::{cosine_distance, cosine_distance_grad_fd, Act, ContrastiveProblem, MatchingProblem, OracleMlp};
use rand::Rng as _;

pub const REL_TOL: f64 = 1e-6;
pub const FD_COSINE_MIN: f64 = 0.99;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub draws: usize,
    /// Largest relative error, or smallest cosine for the FD check.
    pub worst: f64,
    pub pass: bool,
}

/// Oracle twin of a dense-only model.
fn oracle_of(model: &ClassifierModel<f64>) -> OracleMlp {
    let arch = model.architecture();
    let mut widths = vec![arch.input.numel()];
    let mut act = Act::Tanh;
    for layer in &arch.layers {
        match layer {
            LayerSpec::Dense { outputs } => widths.push(*outputs),
            LayerSpec::Act { activation: Activation::Relu } => act = Act::Relu,
            LayerSpec::Act { activation: Activation::Tanh } => act = Act::Tanh,
            other => unreachable!("suite builds dense models only, got {other:?}"),
        }
    }
    OracleMlp::from_groups(&widths, model.params(), act)
}

fn tanh_mlp(input: usize, hidden: &[usize], classes: usize, seed: u64) -> ClassifierModel<f64> {
    ClassifierModel::reinitialize(&Architecture::mlp(input, hidden, classes, Activation::Tanh), seed)
        .expect("valid architecture")
}

fn batch(dim: usize, n: usize, classes: usize, seed: u64) -> WeightedBatch<f64> {
    let mut r = rng(seed);
    let pixels = (0..n * dim).map(|_| r.random_range(-2.0..2.0)).collect();
    let labels = (0..n).map(|_| r.random_range(0..classes)).collect();
    let weights = (0..n).map(|_| r.random_range(0.2..1.0)).collect();
    let images = ImageBatch::new(Shape::flat(dim), pixels).expect("sized");
    WeightedBatch::new(images, labels, weights).expect("sized")
}

fn rows(images: &ImageBatch<f64>) -> Vec<Vec<f64>> {
    images.iter().map(<[f64]>::to_vec).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(b).max(1e-12)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b))
}

fn worst_of(name: &'static str, values: Vec<f64>, lower_is_better: bool) -> CheckResult {
    let (worst, pass) = if lower_is_better {
        let w = values.iter().copied().fold(0.0, f64::max);
        (w, w < REL_TOL)
    } else {
        let w = values.iter().copied().fold(f64::INFINITY, f64::min);
        (w, w > FD_COSINE_MIN)
    };
    CheckResult { name, draws: values.len(), worst, pass }
}

pub fn run_suite(draws: usize) -> Vec<CheckResult> {
    let seeds = 0..draws as u64;

    let ce = seeds
        .clone()
        .map(|s| {
            let model = tanh_mlp(5, &[6], 3, s);
            let b = batch(5, 1 + s as usize % 8, 3, s + 100);
            let want = oracle_of(&model).weighted_ce(&rows(&b.images), &b.labels, &b.weights);
            let got = model.weighted_ce_loss(&b).expect("valid batch");
            (got - want).abs() / want.abs()
        })
        .collect();

    let mut dist = Vec::new();
    let mut dist_grad = Vec::new();
    for s in seeds.clone() {
        let mut r = rng(s + 200);
        let mut group = |n: usize| (0..n).map(|_| r.random_range(-2.0..2.0)).collect::<Vec<f64>>();
        let syn = GradientVector::new(vec![group(6), group(3)]);
        let real = GradientVector::new(vec![group(6), group(3)]);
        let want = cosine_distance(syn.groups(), real.groups());
        dist.push((matching_distance(&syn, &real).expect("same layout") - want).abs() / want.abs());
        let grad = distance_grad_wrt_gsyn(&syn, &real).expect("non-zero groups").flatten();
        dist_grad.push(rel(&grad, &cosine_distance_grad_fd(syn.groups(), real.groups(), 1e-6).concat()));
    }

    let mut cont_loss = Vec::new();
    let mut cont_grad = Vec::new();
    for s in seeds.clone() {
        let data = synthetic_blob_dataset::<f64>(2, 20, Shape::flat(4), 3.0, s).expect("blobs");
        let buffer = initialize_buffer(&data, 4, &InitMode::RealSample, Normalization::identity(1), s).expect("buffer");
        let deployed = tanh_mlp(4, &[8], 2, s + 1);
        let oracle = oracle_of(&deployed);
        let anchors: Vec<usize> = (0..8).filter(|i| !(i + s as usize).is_multiple_of(3)).collect();
        let images = rows(buffer.images());
        for normalize in [false, true] {
            let out = contrastive_loss_and_grad(&deployed, &buffer, &anchors, 0.3, normalize, s).expect("contrastive");
            let idx = out.indexing.expect("two classes, IpC > 1");
            let problem = ContrastiveProblem {
                model: &oracle,
                anchors: &idx.anchors,
                positives: &idx.positives,
                negatives: &idx.negatives,
                tau: 0.3,
                normalize,
            };
            let want = problem.loss(&images);
            cont_loss.push((out.loss - want).abs() / want.abs());
            cont_grad.push(rel(out.grad.as_slice(), &problem.anchor_grad_fd(&images, 1e-5).concat()));
        }
    }

    let mut fd = Vec::new();
    for s in seeds {
        for ipc in [1usize, 5] {
            let theta = tanh_mlp(16, &[32], 4, 1000 * ipc as u64 + s);
            let labels: Vec<usize> = (0..4).flat_map(|c| vec![c; ipc]).collect();
            let syn_images = batch(16, labels.len(), 4, s + 300).images;
            let syn = WeightedBatch::unweighted(syn_images, labels).expect("sized");
            let real = batch(16, 16, 4, s + 400);
            let step = fd_match_gradient(&theta, &syn, &real, DistanceMetric::Cosine, EpsilonRule::default())
                .expect("matching step");
            let oracle = oracle_of(&theta);
            let real_rows = rows(&real.images);
            let problem = MatchingProblem {
                model: &oracle,
                syn_labels: &syn.labels,
                real: &real_rows,
                real_labels: &real.labels,
                real_weights: &real.weights,
            };
            fd.push(cosine(step.grad.as_slice(), &problem.distance_grad_fd(&rows(&syn.images), 1e-5).concat()));
        }
    }

    vec![
        worst_of("weighted_ce_loss", ce, true),
        worst_of("matching_distance", dist, true),
        worst_of("distance_grad_wrt_gsyn", dist_grad, true),
        worst_of("contrastive_loss", cont_loss, true),
        worst_of("contrastive_grad", cont_grad, true),
        worst_of("fd_match_gradient_cosine", fd, false),
    ]
}
