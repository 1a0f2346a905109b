//! Synthetic-buffer updates by gradient matching.
//!
//! The default variant matches gradients at `L` freshly initialised models
//! per segment, one step each, using a finite-difference second-order term.
//! `deco-full` and `deco-inner` keep a model trajectory trained on the buffer
//! and use exact second-order gradients; they exist as ablations and timing
//! references.

mod contrastive;
mod matching;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample;

use crate::buffer::CondensedBuffer;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::labeling::ActiveSets;
use crate::model::{Architecture, ClassifierModel, WeightedBatch};
use crate::rng::{self, derive_seed};
use crate::scalar::Scalar;
use crate::tensor::ImageBatch;

pub use contrastive::{contrastive_loss_and_grad, ContrastiveIndexing, ContrastiveOutput};
pub use matching::{
    distance, distance_grad, distance_grad_wrt_gsyn, exact_match_gradient, fd_match_gradient, matching_distance,
    MatchStep,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DistanceMetric {
    /// Per-group `1 − cos`, summed over groups.
    #[default]
    Cosine,
    /// `Σ ‖g_syn − g_real‖²`.
    SquaredEuclidean,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EpsilonRule {
    /// `ε = c / ‖v‖₂`.
    Relative(f64),
    Fixed(f64),
}

impl Default for EpsilonRule {
    fn default() -> Self {
        Self::Relative(0.01)
    }
}

impl EpsilonRule {
    pub fn epsilon<T: Scalar>(self, direction_norm: T) -> T {
        match self {
            Self::Relative(c) => T::lit(c) / direction_norm,
            Self::Fixed(e) => T::lit(e),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Variant {
    #[default]
    Deco,
    DecoFull,
    DecoInner,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Deco => "deco",
            Self::DecoFull => "deco-full",
            Self::DecoInner => "deco-inner",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deco" => Ok(Self::Deco),
            "deco-full" => Ok(Self::DecoFull),
            "deco-inner" => Ok(Self::DecoInner),
            other => Err(Error::config(format!("unknown variant {other:?}"))),
        }
    }
}

/// SGD with momentum on synthetic pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticOptimizer {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for SyntheticOptimizer {
    fn default() -> Self {
        Self { lr: 0.1, momentum: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchConfig {
    /// `L`: matching iterations per segment (outer iterations for `deco-full`).
    pub iterations: usize,
    pub metric: DistanceMetric,
    pub epsilon: EpsilonRule,
    pub optimizer: SyntheticOptimizer,
    /// Weight of the contrastive term.
    pub alpha: f64,
    pub tau: f64,
    pub variant: Variant,
    /// `T`: model steps on the buffer per outer iteration (bilevel variants).
    pub inner_epochs: usize,
    /// Learning rate of the inner model steps (mean loss over the buffer).
    pub inner_lr: f64,
    /// L2-normalise encoder features before the contrastive dot products.
    pub normalize_features: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            metric: DistanceMetric::Cosine,
            epsilon: EpsilonRule::default(),
            optimizer: SyntheticOptimizer::default(),
            alpha: 0.1,
            tau: 0.07,
            variant: Variant::Deco,
            inner_epochs: 10,
            inner_lr: 0.01,
            normalize_features: true,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("iterations per segment must be at least 1"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config(format!("temperature must be positive, got {}", self.tau)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if self.variant != Variant::Deco && self.inner_epochs == 0 {
            return Err(Error::config("inner epochs must be at least 1"));
        }
        match self.epsilon {
            EpsilonRule::Relative(c) | EpsilonRule::Fixed(c) if !(c > 0.0) => {
                Err(Error::config(format!("epsilon constant must be positive, got {c}")))
            }
            _ => Ok(()),
        }
    }

    /// (outer, inner) loop counts of the variant.
    pub fn schedule(&self) -> (usize, usize) {
        match self.variant {
            Variant::Deco => (self.iterations, 1),
            Variant::DecoFull => (self.iterations, self.inner_epochs),
            Variant::DecoInner => (1, self.iterations * self.inner_epochs),
        }
    }

    /// Matching steps per segment.
    pub fn total_steps(&self) -> usize {
        let (o, i) = self.schedule();
        o * i
    }
}

/// One row per matching step.
#[derive(Clone, Debug, PartialEq)]
pub struct CondenseLog {
    pub segment: usize,
    pub iteration: usize,
    pub variant: Variant,
    pub distance: f64,
    pub contrastive: f64,
    pub epsilon: Option<f64>,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

/// Per-slot momentum for the synthetic optimizer.
struct Momentum<T> {
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Momentum<T> {
    fn new(slots: usize, numel: usize) -> Self {
        Self { velocity: vec![vec![T::zero(); numel]; slots] }
    }

    /// Applies `x ← x − lr·(μ·m + g)` to `slots`; `grad` rows follow `slots` order.
    fn step(
        &mut self,
        buffer: &mut CondensedBuffer<T>,
        slots: &[usize],
        grad: &ImageBatch<T>,
        opt: SyntheticOptimizer,
    ) -> Result<()> {
        let (lr, mu) = (T::lit(opt.lr), T::lit(opt.momentum));
        let vel = &mut self.velocity;
        buffer.slots_mut(slots)?.update(|k, slot, px| {
            let g = grad.image(k);
            for ((x, m), &gi) in px.iter_mut().zip(vel[slot].iter_mut()).zip(g) {
                *m = mu * *m + gi;
                *x -= lr * *m;
            }
        });
        buffer.check_balance()
    }
}

fn real_batch<T: Scalar>(active: &ActiveSets<T>, buffer: &CondensedBuffer<T>) -> Result<WeightedBatch<T>> {
    let images = ImageBatch::from_images(buffer.shape(), active.active_stream.iter().map(|s| s.image.as_slice()))?;
    WeightedBatch::new(
        images,
        active.active_stream.iter().map(|s| s.pseudo_label).collect(),
        active.active_stream.iter().map(|s| s.confidence).collect(),
    )
}

fn synthetic_batch<T: Scalar>(buffer: &CondensedBuffer<T>, slots: &[usize]) -> Result<WeightedBatch<T>> {
    WeightedBatch::unweighted(buffer.images().select(slots), slots.iter().map(|&i| buffer.labels()[i]).collect())
}

fn with_segment<T>(segment: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Numeric(m) => Error::Numeric(format!("segment {segment}: {m}")),
        other => other,
    })
}

struct StepContext<'a, T> {
    deployed: &'a ClassifierModel<T>,
    cfg: &'a MatchConfig,
    seed: u64,
    segment: usize,
}

impl<T: Scalar> StepContext<'_, T> {
    /// One matching-plus-contrastive update of `slots` at evaluation model `theta`.
    fn step(
        &self,
        buffer: &mut CondensedBuffer<T>,
        momentum: &mut Momentum<T>,
        theta: &ClassifierModel<T>,
        slots: &[usize],
        real: &WeightedBatch<T>,
        iteration: usize,
    ) -> Result<CondenseLog> {
        let start = Instant::now();
        let syn = synthetic_batch(buffer, slots)?;
        let m = match self.cfg.variant {
            Variant::Deco => fd_match_gradient(theta, &syn, real, self.cfg.metric, self.cfg.epsilon)?,
            _ => exact_match_gradient(theta, &syn, real, self.cfg.metric)?,
        };
        let mut grad = m.grad;
        let mut l_cont = T::zero();
        if self.cfg.alpha > 0.0 {
            let c = contrastive_loss_and_grad(
                self.deployed,
                buffer,
                slots,
                self.cfg.tau,
                self.cfg.normalize_features,
                derive_seed(self.seed, &[self.segment as u64, iteration as u64, 1]),
            )?;
            l_cont = c.loss;
            let a = T::lit(self.cfg.alpha);
            for (g, &gc) in grad.as_mut_slice().iter_mut().zip(c.grad.as_slice()) {
                *g += a * gc;
            }
        }
        let grad_norm = crate::tensor::norm(grad.as_slice()).real();
        momentum.step(buffer, slots, &grad, self.cfg.optimizer)?;
        Ok(CondenseLog {
            segment: self.segment,
            iteration,
            variant: self.cfg.variant,
            distance: m.distance.real(),
            contrastive: l_cont.real(),
            epsilon: m.epsilon.map(Scalar::real),
            grad_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// Model used for the `outer`-th matching round of a segment.
pub fn evaluation_model<T: Scalar>(
    arch: &Architecture,
    seed: u64,
    segment: usize,
    outer: usize,
) -> Result<ClassifierModel<T>> {
    ClassifierModel::reinitialize(arch, derive_seed(seed, &[segment as u64, outer as u64]))
}

/// Updates the active slots with `cfg.iterations` one-step matching rounds.
/// Evaluation models are fresh per round; the contrastive term goes through
/// the frozen `deployed` model. Slots outside the active classes are not
/// written.
pub fn condense_segment<T: Scalar>(
    buffer: &mut CondensedBuffer<T>,
    active: &ActiveSets<T>,
    deployed: &ClassifierModel<T>,
    cfg: &MatchConfig,
    seed: u64,
    segment: usize,
) -> Result<Vec<CondenseLog>> {
    cfg.validate()?;
    if active.is_empty() || active.active_stream.is_empty() {
        return Err(Error::input("condensation needs non-empty active sets"));
    }
    let slots = &active.active_synthetic_indices;
    let real = real_batch(active, buffer)?;
    let ctx = StepContext { deployed, cfg, seed, segment };
    let mut momentum = Momentum::new(buffer.len(), buffer.shape().numel());
    let mut logs = Vec::with_capacity(cfg.iterations);
    for l in 0..cfg.iterations {
        let theta = evaluation_model(deployed.architecture(), seed, segment, l)?;
        logs.push(with_segment(segment, ctx.step(buffer, &mut momentum, &theta, slots, &real, l))?);
    }
    Ok(logs)
}

/// Bilevel variant: each outer round starts from a fresh model and alternates
/// an exact matching step on the active slots with one SGD step of the model
/// on the whole buffer. `deco-full` runs `L` rounds of `T` steps,
/// `deco-inner` one round of `L·T` steps.
pub fn condense_full_bilevel<T: Scalar>(
    buffer: &mut CondensedBuffer<T>,
    active: &ActiveSets<T>,
    deployed: &ClassifierModel<T>,
    cfg: &MatchConfig,
    seed: u64,
    segment: usize,
) -> Result<Vec<CondenseLog>> {
    cfg.validate()?;
    if active.is_empty() || active.active_stream.is_empty() {
        return Err(Error::input("condensation needs non-empty active sets"));
    }
    let mut cfg = cfg.clone();
    if cfg.variant == Variant::Deco {
        cfg.variant = Variant::DecoFull;
    }
    let (outer, inner) = cfg.schedule();
    let slots = &active.active_synthetic_indices;
    let real = real_batch(active, buffer)?;
    let ctx = StepContext { deployed, cfg: &cfg, seed, segment };
    let mut momentum = Momentum::new(buffer.len(), buffer.shape().numel());
    let mut logs = Vec::with_capacity(outer * inner);
    let inner_lr = T::lit(cfg.inner_lr) / T::from_usize_lossy(buffer.len());
    for o in 0..outer {
        let mut theta = evaluation_model(deployed.architecture(), seed, segment, o)?;
        for t in 0..inner {
            let row = ctx.step(buffer, &mut momentum, &theta, slots, &real, o * inner + t);
            logs.push(with_segment(segment, row)?);
            if t + 1 < inner {
                let (images, labels) = buffer.as_training_set();
                let g = with_segment(segment, theta.param_gradients(&WeightedBatch::unweighted(images, labels)?))?;
                for (p, gp) in theta.params_mut().iter_mut().zip(g.groups()) {
                    for (w, &d) in p.iter_mut().zip(gp) {
                        *w -= inner_lr * d;
                    }
                }
            }
        }
    }
    Ok(logs)
}

/// Dispatches on `cfg.variant`.
pub fn condense<T: Scalar>(
    buffer: &mut CondensedBuffer<T>,
    active: &ActiveSets<T>,
    deployed: &ClassifierModel<T>,
    cfg: &MatchConfig,
    seed: u64,
    segment: usize,
) -> Result<Vec<CondenseLog>> {
    match cfg.variant {
        Variant::Deco => condense_segment(buffer, active, deployed, cfg, seed, segment),
        _ => condense_full_bilevel(buffer, active, deployed, cfg, seed, segment),
    }
}

/// Mean matching distance of the active slots over fresh models drawn from
/// `seeds`. Used to compare buffers produced by different variants.
pub fn mean_fresh_distance<T: Scalar>(
    buffer: &CondensedBuffer<T>,
    active: &ActiveSets<T>,
    arch: &Architecture,
    metric: DistanceMetric,
    seeds: &[u64],
) -> Result<f64> {
    if seeds.is_empty() {
        return Err(Error::input("need at least one evaluation seed"));
    }
    let real = real_batch(active, buffer)?;
    let syn = synthetic_batch(buffer, &active.active_synthetic_indices)?;
    let mut total = 0.0;
    for &s in seeds {
        let theta = ClassifierModel::<T>::reinitialize(arch, s)?;
        total += distance(metric, &theta.param_gradients(&syn)?, &theta.param_gradients(&real)?)?.real();
    }
    Ok(total / seeds.len() as f64)
}

/// Offline condensation from labeled data. Each iteration draws a fresh
/// model and matches every class separately against up to
/// `batch_per_class` of its labeled samples (unit weights). Returns the mean
/// distance per iteration.
pub fn condense_offline<T: Scalar>(
    buffer: &mut CondensedBuffer<T>,
    labeled: &Dataset<T>,
    arch: &Architecture,
    cfg: &MatchConfig,
    iterations: usize,
    batch_per_class: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if labeled.classes != buffer.classes() {
        return Err(Error::config(format!(
            "labeled set has {} classes, buffer has {}",
            labeled.classes,
            buffer.classes()
        )));
    }
    let by_class = labeled.class_indices();
    let mut r = rng::rng(derive_seed(seed, &[u64::MAX]));
    let mut momentum = Momentum::new(buffer.len(), buffer.shape().numel());
    let mut history = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let theta = ClassifierModel::<T>::reinitialize(arch, derive_seed(seed, &[u64::MAX, it as u64]))?;
        let mut total = 0.0;
        for (c, idx) in by_class.iter().enumerate() {
            let picks: Vec<usize> =
                sample(&mut r, idx.len(), batch_per_class.min(idx.len())).iter().map(|p| idx[p]).collect();
            let real = WeightedBatch::unweighted(labeled.images.select(&picks), vec![c; picks.len()])?;
            let slots: Vec<usize> = buffer.class_slots(c).collect();
            let syn = synthetic_batch(buffer, &slots)?;
            let m = fd_match_gradient(&theta, &syn, &real, cfg.metric, cfg.epsilon)?;
            total += m.distance.real();
            momentum.step(buffer, &slots, &m.grad, cfg.optimizer)?;
        }
        history.push(total / by_class.len() as f64);
    }
    Ok(history)
}
