#![allow(dead_code)]

use deco_core::buffer::{initialize_buffer, InitMode};
use deco_core::data::synthetic_blob_dataset;
use deco_core::labeling::{assign_pseudo_labels, filter_active, ActiveSets};
use deco_core::model::Activation;
use deco_core::orchestrator::ModelKind;
use deco_core::rng::rng;
use deco_core::{
    Architecture, ClassifierModel, CondensedBuffer, Dataset, ExperimentConfig, ImageBatch, Normalization, Shape,
    WeightedBatch,
};
use deco_oracle::{Act, OracleMlp};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

/// Oracle twin of a dense-only core model.
pub fn oracle_of(model: &ClassifierModel<f64>) -> OracleMlp {
    let arch = model.architecture();
    let mut widths = vec![arch.input.numel()];
    let mut act = Act::Tanh;
    for layer in &arch.layers {
        match layer {
            deco_core::model::LayerSpec::Dense { outputs } => widths.push(*outputs),
            deco_core::model::LayerSpec::Act { activation } => {
                act = match activation {
                    Activation::Relu => Act::Relu,
                    Activation::Tanh => Act::Tanh,
                }
            }
            other => panic!("oracle supports dense models only, got {other:?}"),
        }
    }
    OracleMlp::from_groups(&widths, model.params(), act)
}

pub fn tanh_mlp(input: usize, hidden: &[usize], classes: usize, seed: u64) -> ClassifierModel<f64> {
    ClassifierModel::reinitialize(&Architecture::mlp(input, hidden, classes, Activation::Tanh), seed).unwrap()
}

pub fn gaussian_images(shape: Shape, n: usize, seed: u64) -> ImageBatch<f64> {
    let mut r = rng(seed);
    let data = (0..n * shape.numel()).map(|_| StandardNormal.sample(&mut r)).collect();
    ImageBatch::new(shape, data).unwrap()
}

pub fn rows(images: &ImageBatch<f64>) -> Vec<Vec<f64>> {
    images.iter().map(<[f64]>::to_vec).collect()
}

/// Batch with random labels and weights in `[0.2, 1)`.
pub fn random_batch(dim: usize, n: usize, classes: usize, seed: u64) -> WeightedBatch<f64> {
    let mut r = rng(seed ^ 0xBA7C);
    let labels = (0..n).map(|_| r.random_range(0..classes)).collect();
    let weights = (0..n).map(|_| r.random_range(0.2..1.0)).collect();
    WeightedBatch::new(gaussian_images(Shape::flat(dim), n, seed), labels, weights).unwrap()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// `‖a − b‖ / max(‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    diff / b.iter().map(|x| x * x).sum::<f64>().sqrt().max(floor)
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0).max(1.0)).sqrt()
}

/// Blob data, a real-sample buffer and a deployed model that saw the data.
pub struct Scene {
    pub data: Dataset<f64>,
    pub buffer: CondensedBuffer<f64>,
    pub deployed: ClassifierModel<f64>,
}

pub fn scene(classes: usize, ipc: usize, dim: usize, seed: u64) -> Scene {
    let data = synthetic_blob_dataset::<f64>(classes, 60, Shape::flat(dim), 3.0, seed).unwrap();
    let buffer = initialize_buffer(&data, ipc, &InitMode::RealSample, Normalization::identity(1), seed).unwrap();
    let deployed = tanh_mlp(dim, &[8], classes, seed + 1);
    Scene { data, buffer, deployed }
}

/// Active sets from a window of `per_class` samples of each class in `active`.
pub fn active_window(scene: &Scene, active: &[usize], per_class: usize) -> ActiveSets<f64> {
    let idx: Vec<usize> = scene
        .data
        .class_indices()
        .iter()
        .enumerate()
        .filter(|(c, _)| active.contains(c))
        .flat_map(|(_, v)| v[..per_class].to_vec())
        .collect();
    let samples = assign_pseudo_labels(&scene.deployed, &scene.data.images.select(&idx)).unwrap();
    let mut active_sets = filter_active(&samples, active, &scene.buffer).unwrap();
    // keep every window sample regardless of the deployed model's guess
    active_sets.active_stream = samples
        .into_iter()
        .zip(&idx)
        .map(|(mut s, &i)| {
            s.pseudo_label = scene.data.labels[i];
            s
        })
        .collect();
    active_sets
}

/// Two-class blob regime where warm-started retraining on the replay
/// memory dominates the outcome.
pub fn forgetting_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    for (k, v) in [
        ("blob_classes", "2"),
        ("blob_train_per_class", "2000"),
        ("blob_separation", "2.5"),
        ("ipc", "1"),
        ("stream_length", "2000"),
        ("stc", "100"),
        ("segment_size", "50"),
        ("beta", "10"),
        ("pretrain_epochs", "2"),
        ("labeled_ratio", "0.01"),
        ("retrain_epochs", "200"),
        ("lr", "0.1"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.seed = seed;
    cfg
}

/// Small, fast blob configuration.
pub fn quick_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    for (k, v) in [
        ("blob_classes", "3"),
        ("blob_dim", "6"),
        ("blob_train_per_class", "400"),
        ("blob_test_per_class", "50"),
        ("blob_separation", "3"),
        ("ipc", "2"),
        ("stream_length", "600"),
        ("stc", "100"),
        ("segment_size", "50"),
        ("beta", "4"),
        ("pretrain_epochs", "5"),
        ("retrain_epochs", "5"),
        ("offline_iterations", "5"),
        ("iterations", "3"),
        ("hidden", "8"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.model = ModelKind::Mlp;
    cfg.seed = seed;
    cfg
}
