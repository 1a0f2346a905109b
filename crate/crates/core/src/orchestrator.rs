//! End-to-end runs: pretraining, the streaming loop, periodic retraining of
//! the deployed model from the buffer, and evaluation.
//!
//! The learner only ever sees `StreamSegment::images`. Hidden labels are
//! read solely to fill the pseudo-label accuracy columns of the vote log.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::baselines::{Policy, SelectionBuffer};
use crate::buffer::{initialize_buffer, CondensedBuffer, InitMode};
use crate::condense::{condense, CondenseLog, EpsilonRule, MatchConfig};
use crate::data::{load_cifar10, synthetic_blob_dataset, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::labeling::{assign_pseudo_labels, filter_active, majority_vote, pseudo_label_accuracy, ActiveSets};
use crate::model::{Activation, Architecture, ClassifierModel, WeightedBatch};
use crate::rng::{self, derive_seed};
use crate::scalar::Scalar;
use crate::stream::{build_stream, Stream, StreamSpec};
use crate::tensor::{argmax, Shape};

/// Environment variable naming the directory that holds external datasets.
pub const DATA_ROOT_ENV: &str = "DECO_DATA_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Blobs,
    Cifar10,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Deco,
    Baseline(Policy),
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Deco => f.write_str("deco"),
            Self::Baseline(p) => write!(f, "{p}"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "deco" {
            Ok(Self::Deco)
        } else {
            s.parse().map(Self::Baseline)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Linear,
    Mlp,
    Convnet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    RealSample,
    ClassMean,
    CondenseOffline,
}

/// SGD with momentum and L2 weight decay on the summed minibatch loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelOptimizer {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for ModelOptimizer {
    fn default() -> Self {
        Self { lr: 1e-3, momentum: 0.9, weight_decay: 5e-4, batch_size: 128 }
    }
}

/// Every knob of a run. Text form is one `key = value` per line.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    /// Overrides the data-root environment variable.
    pub data_root: Option<PathBuf>,
    pub blob_classes: usize,
    pub blob_dim: usize,
    pub blob_train_per_class: usize,
    pub blob_test_per_class: usize,
    pub blob_separation: f64,
    /// Seed of the blob generator; fixed across run seeds by default.
    pub data_seed: u64,
    /// Caps on the CIFAR-10 splits (0 = no cap), taken class-stratified.
    pub train_limit: usize,
    pub test_limit: usize,
    pub labeled_ratio: f64,
    pub ipc: usize,
    pub stc: usize,
    pub segment_size: usize,
    pub stream_length: usize,
    pub with_replacement: bool,
    /// `M_f`: voting threshold as a fraction of the window.
    pub threshold: f64,
    /// Disables the voting filter when false (every sample retained).
    pub voting: bool,
    pub matching: MatchConfig,
    /// Retrain the deployed model after every `beta` segments.
    pub beta: usize,
    pub retrain_epochs: usize,
    pub pretrain_epochs: usize,
    pub optimizer: ModelOptimizer,
    pub method: Method,
    pub init: InitKind,
    pub offline_iterations: usize,
    pub offline_batch: usize,
    pub model: ModelKind,
    pub hidden: Vec<usize>,
    pub conv_widths: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Blobs,
            data_root: None,
            blob_classes: 4,
            blob_dim: 16,
            blob_train_per_class: 1000,
            blob_test_per_class: 250,
            blob_separation: 6.0,
            data_seed: 0,
            train_limit: 0,
            test_limit: 0,
            labeled_ratio: 0.1,
            ipc: 10,
            stc: 500,
            segment_size: 100,
            stream_length: 20_000,
            with_replacement: false,
            threshold: 0.4,
            voting: true,
            matching: MatchConfig::default(),
            beta: 10,
            retrain_epochs: 50,
            pretrain_epochs: 100,
            optimizer: ModelOptimizer::default(),
            method: Method::Deco,
            init: InitKind::CondenseOffline,
            offline_iterations: 200,
            offline_batch: 64,
            model: ModelKind::Mlp,
            hidden: vec![32],
            conv_widths: vec![8, 16],
            activation: Activation::Relu,
            seed: 0,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::config(format!("invalid value {value:?} for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean {value:?} for `{key}`"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Config keys in canonical order.
    pub const KEYS: &'static [&'static str] = &[
        "dataset",
        "data_root",
        "blob_classes",
        "blob_dim",
        "blob_train_per_class",
        "blob_test_per_class",
        "blob_separation",
        "data_seed",
        "train_limit",
        "test_limit",
        "labeled_ratio",
        "ipc",
        "stc",
        "segment_size",
        "stream_length",
        "with_replacement",
        "threshold",
        "voting",
        "iterations",
        "alpha",
        "tau",
        "epsilon",
        "syn_lr",
        "syn_momentum",
        "variant",
        "inner_epochs",
        "inner_lr",
        "normalize_features",
        "beta",
        "retrain_epochs",
        "pretrain_epochs",
        "lr",
        "momentum",
        "weight_decay",
        "batch_size",
        "policy",
        "init",
        "offline_iterations",
        "offline_batch",
        "model",
        "hidden",
        "conv_widths",
        "activation",
        "seed",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "dataset" => {
                self.dataset = match v {
                    "blobs" => DatasetKind::Blobs,
                    "cifar10" => DatasetKind::Cifar10,
                    _ => return Err(Error::config(format!("unknown dataset {v:?}"))),
                }
            }
            "data_root" => self.data_root = (!v.is_empty()).then(|| PathBuf::from(v)),
            "blob_classes" => self.blob_classes = parse(key, v)?,
            "blob_dim" => self.blob_dim = parse(key, v)?,
            "blob_train_per_class" => self.blob_train_per_class = parse(key, v)?,
            "blob_test_per_class" => self.blob_test_per_class = parse(key, v)?,
            "blob_separation" => self.blob_separation = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "train_limit" => self.train_limit = parse(key, v)?,
            "test_limit" => self.test_limit = parse(key, v)?,
            "labeled_ratio" => self.labeled_ratio = parse(key, v)?,
            "ipc" => self.ipc = parse(key, v)?,
            "stc" => self.stc = parse(key, v)?,
            "segment_size" => self.segment_size = parse(key, v)?,
            "stream_length" => self.stream_length = parse(key, v)?,
            "with_replacement" => self.with_replacement = parse_bool(key, v)?,
            "threshold" => self.threshold = parse(key, v)?,
            "voting" => self.voting = parse_bool(key, v)?,
            "iterations" => self.matching.iterations = parse(key, v)?,
            "alpha" => self.matching.alpha = parse(key, v)?,
            "tau" => self.matching.tau = parse(key, v)?,
            "epsilon" => self.matching.epsilon = EpsilonRule::Relative(parse(key, v)?),
            "syn_lr" => self.matching.optimizer.lr = parse(key, v)?,
            "syn_momentum" => self.matching.optimizer.momentum = parse(key, v)?,
            "variant" => self.matching.variant = v.parse()?,
            "inner_epochs" => self.matching.inner_epochs = parse(key, v)?,
            "inner_lr" => self.matching.inner_lr = parse(key, v)?,
            "normalize_features" => self.matching.normalize_features = parse_bool(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "retrain_epochs" => self.retrain_epochs = parse(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, v)?,
            "lr" => self.optimizer.lr = parse(key, v)?,
            "momentum" => self.optimizer.momentum = parse(key, v)?,
            "weight_decay" => self.optimizer.weight_decay = parse(key, v)?,
            "batch_size" => self.optimizer.batch_size = parse(key, v)?,
            "policy" => self.method = v.parse()?,
            "init" => {
                self.init = match v {
                    "real-sample" => InitKind::RealSample,
                    "class-mean" => InitKind::ClassMean,
                    "condense-offline" => InitKind::CondenseOffline,
                    _ => return Err(Error::config(format!("unknown init mode {v:?}"))),
                }
            }
            "offline_iterations" => self.offline_iterations = parse(key, v)?,
            "offline_batch" => self.offline_batch = parse(key, v)?,
            "model" => {
                self.model = match v {
                    "linear" => ModelKind::Linear,
                    "mlp" => ModelKind::Mlp,
                    "convnet" => ModelKind::Convnet,
                    _ => return Err(Error::config(format!("unknown model {v:?}"))),
                }
            }
            "hidden" => self.hidden = parse_list(key, v)?,
            "conv_widths" => self.conv_widths = parse_list(key, v)?,
            "activation" => {
                self.activation = match v {
                    "relu" => Activation::Relu,
                    "tanh" => Activation::Tanh,
                    _ => return Err(Error::config(format!("unknown activation {v:?}"))),
                }
            }
            "seed" => self.seed = parse(key, v)?,
            _ => return Err(Error::config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let m = &self.matching;
        Ok(match key {
            "dataset" => match self.dataset {
                DatasetKind::Blobs => "blobs".into(),
                DatasetKind::Cifar10 => "cifar10".into(),
            },
            "data_root" => self.data_root.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "blob_classes" => self.blob_classes.to_string(),
            "blob_dim" => self.blob_dim.to_string(),
            "blob_train_per_class" => self.blob_train_per_class.to_string(),
            "blob_test_per_class" => self.blob_test_per_class.to_string(),
            "blob_separation" => format!("{:?}", self.blob_separation),
            "data_seed" => self.data_seed.to_string(),
            "train_limit" => self.train_limit.to_string(),
            "test_limit" => self.test_limit.to_string(),
            "labeled_ratio" => format!("{:?}", self.labeled_ratio),
            "ipc" => self.ipc.to_string(),
            "stc" => self.stc.to_string(),
            "segment_size" => self.segment_size.to_string(),
            "stream_length" => self.stream_length.to_string(),
            "with_replacement" => self.with_replacement.to_string(),
            "threshold" => format!("{:?}", self.threshold),
            "voting" => self.voting.to_string(),
            "iterations" => m.iterations.to_string(),
            "alpha" => format!("{:?}", m.alpha),
            "tau" => format!("{:?}", m.tau),
            "epsilon" => match m.epsilon {
                EpsilonRule::Relative(c) | EpsilonRule::Fixed(c) => format!("{c:?}"),
            },
            "syn_lr" => format!("{:?}", m.optimizer.lr),
            "syn_momentum" => format!("{:?}", m.optimizer.momentum),
            "variant" => m.variant.to_string(),
            "inner_epochs" => m.inner_epochs.to_string(),
            "inner_lr" => format!("{:?}", m.inner_lr),
            "normalize_features" => m.normalize_features.to_string(),
            "beta" => self.beta.to_string(),
            "retrain_epochs" => self.retrain_epochs.to_string(),
            "pretrain_epochs" => self.pretrain_epochs.to_string(),
            "lr" => format!("{:?}", self.optimizer.lr),
            "momentum" => format!("{:?}", self.optimizer.momentum),
            "weight_decay" => format!("{:?}", self.optimizer.weight_decay),
            "batch_size" => self.optimizer.batch_size.to_string(),
            "policy" => self.method.to_string(),
            "init" => match self.init {
                InitKind::RealSample => "real-sample".into(),
                InitKind::ClassMean => "class-mean".into(),
                InitKind::CondenseOffline => "condense-offline".into(),
            },
            "offline_iterations" => self.offline_iterations.to_string(),
            "offline_batch" => self.offline_batch.to_string(),
            "model" => match self.model {
                ModelKind::Linear => "linear".into(),
                ModelKind::Mlp => "mlp".into(),
                ModelKind::Convnet => "convnet".into(),
            },
            "hidden" => join(&self.hidden),
            "conv_widths" => join(&self.conv_widths),
            "activation" => match self.activation {
                Activation::Relu => "relu".into(),
                Activation::Tanh => "tanh".into(),
            },
            "seed" => self.seed.to_string(),
            _ => return Err(Error::config(format!("unknown config key `{key}`"))),
        })
    }

    /// Parses `key = value` lines; `#` starts a comment. Later keys win.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| Error::config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v).map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        Self::KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k).expect("known key"))).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("ipc", self.ipc),
            ("stc", self.stc),
            ("segment_size", self.segment_size),
            ("beta", self.beta),
            ("batch_size", self.optimizer.batch_size),
            ("blob_classes", self.blob_classes),
            ("blob_dim", self.blob_dim),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("`{k}` must be positive")));
        }
        if !(self.labeled_ratio > 0.0 && self.labeled_ratio <= 1.0) {
            return Err(Error::config(format!("labeled_ratio must be in (0, 1], got {}", self.labeled_ratio)));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config(format!("threshold must be in [0, 1], got {}", self.threshold)));
        }
        if !(self.optimizer.lr > 0.0) || self.optimizer.momentum < 0.0 || self.optimizer.weight_decay < 0.0 {
            return Err(Error::config("model optimizer needs lr > 0 and non-negative momentum and weight decay"));
        }
        self.matching.validate()
    }

    pub fn architecture(&self, shape: Shape, classes: usize) -> Architecture {
        match self.model {
            ModelKind::Linear => Architecture::linear(shape, classes),
            ModelKind::Mlp => {
                let mut a = Architecture::mlp(shape.numel(), &self.hidden, classes, self.activation);
                a.input = shape;
                a
            }
            ModelKind::Convnet => Architecture::convnet(shape, &self.conv_widths, classes),
        }
    }

    fn data_root(&self) -> Result<PathBuf> {
        self.data_root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .ok_or_else(|| Error::config(format!("dataset root not set; use `data_root` or {DATA_ROOT_ENV}")))
    }
}

/// Normalised splits of one run. `labeled` and `unlabeled` partition the
/// training set; the stream is drawn from `unlabeled`.
#[derive(Clone, Debug)]
pub struct PreparedData<T> {
    pub labeled: Dataset<T>,
    pub unlabeled: Dataset<T>,
    pub test: Dataset<T>,
    pub normalization: Normalization,
}

fn cap<T: Scalar>(d: Dataset<T>, limit: usize, seed: u64) -> Result<Dataset<T>> {
    if limit == 0 || limit >= d.len() {
        return Ok(d);
    }
    Ok(d.stratified_split(limit as f64 / d.len() as f64, seed)?.0)
}

pub fn load_raw<T: Scalar>(cfg: &ExperimentConfig) -> Result<(Dataset<T>, Dataset<T>)> {
    match cfg.dataset {
        DatasetKind::Blobs => {
            let per_class = cfg.blob_train_per_class + cfg.blob_test_per_class;
            let all = synthetic_blob_dataset(
                cfg.blob_classes,
                per_class,
                Shape::flat(cfg.blob_dim),
                cfg.blob_separation,
                cfg.data_seed,
            )?;
            all.stratified_split(cfg.blob_train_per_class as f64 / per_class as f64, derive_seed(cfg.data_seed, &[1]))
        }
        DatasetKind::Cifar10 => {
            let (train, test) = load_cifar10(cfg.data_root()?)?;
            Ok((cap(train, cfg.train_limit, cfg.data_seed)?, cap(test, cfg.test_limit, cfg.data_seed)?))
        }
    }
}

pub fn prepare_data<T: Scalar>(cfg: &ExperimentConfig) -> Result<PreparedData<T>> {
    let (mut train, mut test) = load_raw::<T>(cfg)?;
    let normalization = Normalization::fit(&train)?;
    normalization.apply(&mut train)?;
    normalization.apply(&mut test)?;
    let (labeled, unlabeled) = train.stratified_split(cfg.labeled_ratio, derive_seed(cfg.seed, &[2]))?;
    if let Some(c) = labeled.class_counts().iter().position(|&n| n == 0) {
        return Err(Error::config(format!("class {c} is absent from the labeled split")));
    }
    Ok(PreparedData { labeled, unlabeled, test, normalization })
}

/// Top-1 accuracy.
pub fn evaluate<T: Scalar>(model: &ClassifierModel<T>, test: &Dataset<T>) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::input("cannot evaluate on an empty test set"));
    }
    let logits = model.logits(&test.images)?;
    let hits = logits.iter_rows().zip(&test.labels).filter(|(row, &y)| argmax(row) == y).count();
    Ok(hits as f64 / test.len() as f64)
}

/// Minibatch SGD on the summed weighted loss, warm-started from `model`.
/// Returns the trained model and the mean per-sample loss of every epoch.
pub fn train_model<T: Scalar>(
    model: &ClassifierModel<T>,
    data: &WeightedBatch<T>,
    epochs: usize,
    opt: &ModelOptimizer,
    seed: u64,
) -> Result<(ClassifierModel<T>, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let mut model = model.clone();
    let mut velocity: Vec<Vec<T>> = model.group_sizes().iter().map(|&n| vec![T::zero(); n]).collect();
    let (lr, mu, wd) = (T::lit(opt.lr), T::lit(opt.momentum), T::lit(opt.weight_decay));
    let mut r = rng::rng(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut r);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(opt.batch_size.max(1)) {
            let batch = WeightedBatch {
                images: data.images.select(chunk),
                labels: chunk.iter().map(|&i| data.labels[i]).collect(),
                weights: chunk.iter().map(|&i| data.weights[i]).collect(),
            };
            let (loss, grads) = model.loss_and_param_gradients(&batch)?;
            epoch_loss += loss.real();
            for ((p, g), v) in model.params_mut().iter_mut().zip(grads.groups()).zip(&mut velocity) {
                for ((w, &gw), m) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                    *m = mu * *m + gw + wd * *w;
                    *w -= lr * *m;
                }
            }
        }
        history.push(epoch_loss / data.len() as f64);
    }
    Ok((model, history))
}

/// Trains a fresh model on the labeled split.
pub fn pretrain<T: Scalar>(cfg: &ExperimentConfig, labeled: &Dataset<T>) -> Result<ClassifierModel<T>> {
    if let Some(c) = labeled.class_counts().iter().position(|&n| n == 0) {
        return Err(Error::config(format!("class {c} is absent from the labeled split")));
    }
    let arch = cfg.architecture(labeled.shape(), labeled.classes);
    let init = ClassifierModel::reinitialize(&arch, derive_seed(cfg.seed, &[3]))?;
    let batch = WeightedBatch::unweighted(labeled.images.clone(), labeled.labels.clone())?;
    Ok(train_model(&init, &batch, cfg.pretrain_epochs, &cfg.optimizer, derive_seed(cfg.seed, &[4]))?.0)
}

/// Warm-start retraining of the deployed model on buffer contents (unit weights).
pub fn retrain_from_buffer<T: Scalar>(
    model: &ClassifierModel<T>,
    batch: &WeightedBatch<T>,
    epochs: usize,
    opt: &ModelOptimizer,
    seed: u64,
) -> Result<ClassifierModel<T>> {
    let unit = WeightedBatch::unweighted(batch.images.clone(), batch.labels.clone())?;
    Ok(train_model(model, &unit, epochs, opt, seed)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Pretrain,
    Retrain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    /// Stream samples consumed before this evaluation.
    pub inputs_processed: usize,
    /// Segments consumed before this evaluation.
    pub segments: usize,
    pub test_accuracy: f64,
}

/// Voting diagnostics of one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct VoteRecord {
    pub segment: usize,
    pub window: usize,
    pub short: bool,
    pub active_classes: Vec<usize>,
    pub retained: usize,
    /// Pseudo-label accuracy over the whole window.
    pub pseudo_accuracy_all: Option<f64>,
    /// Pseudo-label accuracy over the retained samples.
    pub pseudo_accuracy_retained: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhaseTimes {
    pub pretrain_ms: f64,
    pub init_ms: f64,
    pub label_ms: f64,
    pub update_ms: f64,
    pub retrain_ms: f64,
    pub eval_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub method: Method,
    pub seed: u64,
    pub checkpoints: Vec<Checkpoint>,
    pub votes: Vec<VoteRecord>,
    pub condense: Vec<CondenseLog>,
    pub phases: PhaseTimes,
    /// Per-class buffer occupancy at the end of the run.
    pub final_class_counts: Vec<usize>,
}

impl RunMetrics {
    /// Accuracy at the last checkpoint.
    pub fn final_accuracy(&self) -> f64 {
        self.checkpoints.last().map(|c| c.test_accuracy).unwrap_or(f64::NAN)
    }

    pub fn mean_checkpoint_accuracy(&self) -> f64 {
        self.checkpoints.iter().map(|c| c.test_accuracy).sum::<f64>() / self.checkpoints.len() as f64
    }

    pub fn retrain_events(&self) -> usize {
        self.checkpoints.iter().filter(|c| c.kind == CheckpointKind::Retrain).count()
    }

    /// Summary scalars keyed by name, for manifests.
    pub fn summary(&self) -> BTreeMap<&'static str, f64> {
        let mut m = BTreeMap::new();
        m.insert("final_accuracy", self.final_accuracy());
        m.insert("mean_checkpoint_accuracy", self.mean_checkpoint_accuracy());
        m.insert("retrain_events", self.retrain_events() as f64);
        m
    }
}

/// The replay memory a run maintains.
#[derive(Clone, Debug)]
pub enum Memory<T> {
    Condensed(CondensedBuffer<T>),
    Selection(SelectionBuffer<T>),
}

impl<T: Scalar> Memory<T> {
    fn training_batch(&self) -> Result<WeightedBatch<T>> {
        match self {
            Self::Condensed(b) => {
                let (images, labels) = b.as_training_set();
                WeightedBatch::unweighted(images, labels)
            }
            Self::Selection(s) => s.policy_train_batch(),
        }
    }

    fn class_counts(&self, classes: usize) -> Vec<usize> {
        match self {
            Self::Condensed(b) => vec![b.ipc(); b.classes()],
            Self::Selection(s) => s.class_counts(classes),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput<T> {
    pub metrics: RunMetrics,
    pub model: ClassifierModel<T>,
    pub memory: Memory<T>,
}

/// Builds the run's stream from the unlabeled split.
pub fn make_stream<T: Scalar>(cfg: &ExperimentConfig, data: &PreparedData<T>) -> Result<Stream<T>> {
    let spec = StreamSpec {
        stc: cfg.stc,
        segment_size: cfg.segment_size,
        total_length: cfg.stream_length,
        seed: derive_seed(cfg.seed, &[5]),
        with_replacement: cfg.with_replacement,
    };
    build_stream(&spec, &data.unlabeled)
}

/// Initial replay memory for the configured method.
pub fn initial_memory<T: Scalar>(
    cfg: &ExperimentConfig,
    data: &PreparedData<T>,
    arch: &Architecture,
) -> Result<Memory<T>> {
    let seed = derive_seed(cfg.seed, &[6]);
    match cfg.method {
        Method::Deco => {
            let mode = match cfg.init {
                InitKind::RealSample => InitMode::RealSample,
                InitKind::ClassMean => InitMode::ClassMean,
                InitKind::CondenseOffline => InitMode::CondenseOffline {
                    iterations: cfg.offline_iterations,
                    batch_per_class: cfg.offline_batch,
                    architecture: arch.clone(),
                    matching: cfg.matching.clone(),
                },
            };
            Ok(Memory::Condensed(initialize_buffer(&data.labeled, cfg.ipc, &mode, data.normalization.clone(), seed)?))
        }
        Method::Baseline(p) => {
            Ok(Memory::Selection(SelectionBuffer::new(p, cfg.ipc * data.labeled.classes, data.labeled.shape())?))
        }
    }
}

/// Full run: data, pretraining, memory initialisation, stream.
pub fn run_experiment<T: Scalar>(cfg: &ExperimentConfig) -> Result<RunOutput<T>> {
    cfg.validate()?;
    let data = prepare_data::<T>(cfg)?;
    let t = Instant::now();
    let model = pretrain(cfg, &data.labeled)?;
    let pretrain_ms = t.elapsed().as_secs_f64() * 1e3;
    let stream = make_stream(cfg, &data)?;
    let mut out = run_on_stream(cfg, &data, model, &stream)?;
    out.metrics.phases.pretrain_ms = pretrain_ms;
    Ok(out)
}

/// Streaming loop from a pretrained model over a prebuilt stream.
pub fn run_on_stream<T: Scalar>(
    cfg: &ExperimentConfig,
    data: &PreparedData<T>,
    pretrained: ClassifierModel<T>,
    stream: &Stream<T>,
) -> Result<RunOutput<T>> {
    cfg.validate()?;
    let classes = data.labeled.classes;
    let arch = pretrained.architecture().clone();
    let mut phases = PhaseTimes::default();
    let mut clock = Instant::now();
    let mut lap = |slot: &mut f64| {
        *slot += clock.elapsed().as_secs_f64() * 1e3;
        clock = Instant::now();
    };

    let mut memory = initial_memory(cfg, data, &arch)?;
    lap(&mut phases.init_ms);
    let mut model = pretrained;
    let mut checkpoints = vec![Checkpoint {
        kind: CheckpointKind::Pretrain,
        inputs_processed: 0,
        segments: 0,
        test_accuracy: evaluate(&model, &data.test)?,
    }];
    lap(&mut phases.eval_ms);

    let mut votes = Vec::with_capacity(stream.segments.len());
    let mut condense_log = Vec::new();
    let mut offer_rng = rng::rng(derive_seed(cfg.seed, &[7]));
    let condense_seed = derive_seed(cfg.seed, &[8]);
    let mut processed = 0;
    for (t, seg) in stream.segments.iter().enumerate() {
        let images = seg.images();
        let samples = assign_pseudo_labels(&model, images)?;
        let active_classes = if cfg.voting {
            majority_vote(&samples, classes, cfg.threshold).active
        } else {
            majority_vote(&samples, classes, 0.0).active
        };
        let active = match &memory {
            Memory::Condensed(b) => filter_active(&samples, &active_classes, b)?,
            Memory::Selection(_) => ActiveSets {
                active_stream: samples.iter().filter(|s| active_classes.contains(&s.pseudo_label)).cloned().collect(),
                active_classes: active_classes.clone(),
                active_synthetic_indices: Vec::new(),
            },
        };
        lap(&mut phases.label_ms);

        let hidden = seg.hidden_labels_for_evaluation();
        votes.push(VoteRecord {
            segment: t,
            window: samples.len(),
            short: seg.is_short(),
            active_classes: active_classes.clone(),
            retained: active.active_stream.len(),
            pseudo_accuracy_all: pseudo_label_accuracy(&samples, hidden),
            pseudo_accuracy_retained: pseudo_label_accuracy(&active.active_stream, hidden),
        });

        match &mut memory {
            Memory::Condensed(buffer) => {
                if !active.is_empty() && !active.active_stream.is_empty() {
                    let rows =
                        condense(buffer, &active, &model, &cfg.matching, condense_seed, t).map_err(|e| match e {
                            Error::Numeric(m) => Error::Numeric(format!("{m} (run seed {})", cfg.seed)),
                            other => other,
                        })?;
                    condense_log.extend(rows);
                }
            }
            Memory::Selection(sel) => {
                for s in &active.active_stream {
                    sel.policy_offer(s, processed + s.position, &model, &mut offer_rng)?;
                }
            }
        }
        processed += seg.len();
        lap(&mut phases.update_ms);

        if (t + 1) % cfg.beta == 0 {
            let batch = memory.training_batch()?;
            model = retrain_from_buffer(
                &model,
                &batch,
                cfg.retrain_epochs,
                &cfg.optimizer,
                derive_seed(cfg.seed, &[9, t as u64]),
            )?;
            if let Memory::Selection(sel) = &mut memory {
                sel.refresh(&model)?;
            }
            lap(&mut phases.retrain_ms);
            checkpoints.push(Checkpoint {
                kind: CheckpointKind::Retrain,
                inputs_processed: processed,
                segments: t + 1,
                test_accuracy: evaluate(&model, &data.test)?,
            });
            lap(&mut phases.eval_ms);
        }
    }
    let metrics = RunMetrics {
        method: cfg.method,
        seed: cfg.seed,
        checkpoints,
        votes,
        condense: condense_log,
        phases,
        final_class_counts: memory.class_counts(classes),
    };
    Ok(RunOutput { metrics, model, memory })
}

/// Method name with the condensation variant folded in.
pub fn variant_label(cfg: &ExperimentConfig) -> String {
    match (cfg.method, cfg.matching.variant) {
        (Method::Deco, v) => v.to_string(),
        (m, _) => m.to_string(),
    }
}
