//! Small image classifiers with hand-written backpropagation.
//!
//! A [`ClassifierModel`] is an architecture descriptor plus one flat
//! parameter group per parametrised layer. Everything except the final dense
//! layer is the encoder; its output is the feature representation used by
//! the contrastive term and by feature-space baselines.
//!
//! Batched operations process samples one at a time and accumulate, so the
//! extra memory of a pass is one set of activations plus the outputs.

mod checkpoint;
mod gradient;
mod layers;

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::dual::Dual;
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::{cast, Scalar};
use crate::tensor::{ImageBatch, Matrix, Shape};

pub use checkpoint::{load_model, read_model, save_model, write_model};
pub use gradient::GradientVector;

/// Probabilities are clamped to at least this value before taking a log.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Avg,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Stride-1 convolution with "same" zero padding; `kernel` must be odd.
    Conv {
        out_channels: usize,
        kernel: usize,
    },
    /// Fully connected layer; flattens its input.
    Dense {
        outputs: usize,
    },
    Act {
        activation: Activation,
    },
    Pool {
        pool: PoolKind,
        size: usize,
    },
}

/// Layer list plus input shape and class count. The last layer must be a
/// dense layer producing one logit per class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: Shape,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

#[derive(Clone, Debug, PartialEq)]
struct Stage {
    spec: LayerSpec,
    input: Shape,
    output: Shape,
    group: Option<usize>,
    fan_in: usize,
}

impl Architecture {
    /// Multinomial logistic regression.
    pub fn linear(input: Shape, classes: usize) -> Self {
        Self { input, classes, layers: vec![LayerSpec::Dense { outputs: classes }] }
    }

    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize, activation: Activation) -> Self {
        let mut layers = Vec::new();
        for &h in hidden {
            layers.push(LayerSpec::Dense { outputs: h });
            layers.push(LayerSpec::Act { activation });
        }
        layers.push(LayerSpec::Dense { outputs: classes });
        Self { input: Shape::flat(input_dim), classes, layers }
    }

    /// `(conv 3x3 -> relu -> avg-pool 2) x widths.len() -> dense`.
    pub fn convnet(input: Shape, widths: &[usize], classes: usize) -> Self {
        let mut layers = Vec::new();
        for &w in widths {
            layers.push(LayerSpec::Conv { out_channels: w, kernel: 3 });
            layers.push(LayerSpec::Act { activation: Activation::Relu });
            layers.push(LayerSpec::Pool { pool: PoolKind::Avg, size: 2 });
        }
        layers.push(LayerSpec::Dense { outputs: classes });
        Self { input, classes, layers }
    }

    fn stages(&self) -> Result<Vec<Stage>> {
        if self.classes < 1 {
            return Err(Error::config("architecture needs at least one class"));
        }
        if self.input.numel() == 0 {
            return Err(Error::config("architecture input shape is empty"));
        }
        match self.layers.last() {
            Some(LayerSpec::Dense { outputs }) if *outputs == self.classes => {}
            _ => return Err(Error::config(format!("last layer must be dense with {} outputs", self.classes))),
        }
        let mut stages = Vec::with_capacity(self.layers.len());
        let mut shape = self.input;
        let mut groups = 0;
        for (idx, &spec) in self.layers.iter().enumerate() {
            let (output, fan_in, has_params) = match spec {
                LayerSpec::Dense { outputs } => {
                    if outputs == 0 {
                        return Err(Error::config(format!("layer {idx}: dense with zero outputs")));
                    }
                    (Shape::flat(outputs), shape.numel(), true)
                }
                LayerSpec::Conv { out_channels, kernel } => {
                    if kernel % 2 == 0 || out_channels == 0 {
                        return Err(Error::config(format!("layer {idx}: conv needs an odd kernel and >0 channels")));
                    }
                    (Shape::new(out_channels, shape.height, shape.width), shape.channels * kernel * kernel, true)
                }
                LayerSpec::Act { .. } => (shape, 0, false),
                LayerSpec::Pool { size, .. } => {
                    if size == 0 || shape.height < size || shape.width < size {
                        return Err(Error::config(format!("layer {idx}: pool size {size} does not fit {shape}")));
                    }
                    (Shape::new(shape.channels, shape.height / size, shape.width / size), 0, false)
                }
            };
            let group = has_params.then(|| {
                groups += 1;
                groups - 1
            });
            stages.push(Stage { spec, input: shape, output, group, fan_in });
            shape = output;
        }
        Ok(stages)
    }

    pub fn validate(&self) -> Result<()> {
        self.stages().map(|_| ())
    }

    /// Parameter count of every group, in layer order.
    pub fn group_sizes(&self) -> Result<Vec<usize>> {
        Ok(self.stages()?.iter().filter_map(group_size).collect())
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.group_sizes()?.iter().sum())
    }

    /// Dimensionality of the encoder output (input of the final dense layer).
    pub fn feature_dim(&self) -> Result<usize> {
        let stages = self.stages()?;
        Ok(stages.last().map(|s| s.input.numel()).unwrap_or(0))
    }
}

fn group_size(stage: &Stage) -> Option<usize> {
    match stage.spec {
        LayerSpec::Dense { outputs } => Some(outputs * stage.input.numel() + outputs),
        LayerSpec::Conv { out_channels, kernel } => {
            Some(out_channels * stage.input.channels * kernel * kernel + out_channels)
        }
        _ => None,
    }
}

/// Images with labels and non-negative per-sample loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedBatch<T> {
    pub images: ImageBatch<T>,
    pub labels: Vec<usize>,
    pub weights: Vec<T>,
}

impl<T: Scalar> WeightedBatch<T> {
    pub fn new(images: ImageBatch<T>, labels: Vec<usize>, weights: Vec<T>) -> Result<Self> {
        if labels.len() != images.len() || weights.len() != images.len() {
            return Err(Error::input(format!(
                "batch lengths differ: {} images, {} labels, {} weights",
                images.len(),
                labels.len(),
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= T::zero()) || !w.is_finite()) {
            return Err(Error::input(format!("negative or non-finite sample weight {w}")));
        }
        Ok(Self { images, labels, weights })
    }

    /// Unit weights, as used for synthetic and stored samples.
    pub fn unweighted(images: ImageBatch<T>, labels: Vec<usize>) -> Result<Self> {
        let weights = vec![T::one(); images.len()];
        Self::new(images, labels, weights)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Outcome of one sample's forward/backward pass.
struct SamplePass<T> {
    loss: T,
    input_grad: Option<Vec<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel<T> {
    arch: Architecture,
    stages: Vec<Stage>,
    params: Vec<Vec<T>>,
}

impl<T: Scalar> ClassifierModel<T> {
    pub fn from_params(arch: Architecture, params: Vec<Vec<T>>) -> Result<Self> {
        let stages = arch.stages()?;
        let sizes: Vec<usize> = stages.iter().filter_map(group_size).collect();
        let got: Vec<usize> = params.iter().map(Vec::len).collect();
        if sizes != got {
            return Err(Error::shape(format!("{sizes:?}"), format!("{got:?}")));
        }
        Ok(Self { arch, stages, params })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        let sizes = arch.group_sizes()?;
        Self::from_params(arch, sizes.iter().map(|&n| vec![T::zero(); n]).collect())
    }

    /// Fresh parameters: weights uniform in `±sqrt(6 / fan_in)`, biases zero.
    pub fn reinitialize(arch: &Architecture, seed: u64) -> Result<Self> {
        let stages = arch.stages()?;
        let mut rng = rng::rng(seed);
        let mut params = Vec::new();
        for stage in &stages {
            let Some(size) = group_size(stage) else { continue };
            let n_bias = match stage.spec {
                LayerSpec::Dense { outputs } => outputs,
                LayerSpec::Conv { out_channels, .. } => out_channels,
                _ => unreachable!(),
            };
            let bound = (6.0 / stage.fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let mut group: Vec<T> = (0..size - n_bias).map(|_| T::lit(dist.sample(&mut rng))).collect();
            group.extend(std::iter::repeat_n(T::zero(), n_bias));
            params.push(group);
        }
        Ok(Self { arch: arch.clone(), stages, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn input_shape(&self) -> Shape {
        self.arch.input
    }

    pub fn params(&self) -> &[Vec<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.params.iter().map(Vec::len).collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.stages.last().map(|s| s.input.numel()).unwrap_or(0)
    }

    /// Parameters viewed as a gradient-shaped vector.
    pub fn param_vector(&self) -> GradientVector<T> {
        GradientVector::new(self.params.clone())
    }

    /// Converts to another scalar type (e.g. `f64` -> `f32`).
    pub fn cast<U: Scalar>(&self) -> ClassifierModel<U> {
        ClassifierModel {
            arch: self.arch.clone(),
            stages: self.stages.clone(),
            params: self.params.iter().map(|g| g.iter().map(|&v| cast(v)).collect()).collect(),
        }
    }

    /// Lifts to dual numbers whose tangent is `direction`.
    pub fn with_tangent(&self, direction: &GradientVector<T>) -> Result<ClassifierModel<Dual<T>>> {
        self.param_vector().check_structure(direction)?;
        let params = self
            .params
            .iter()
            .zip(direction.groups())
            .map(|(p, d)| p.iter().zip(d).map(|(&v, &t)| Dual::new(v, t)).collect())
            .collect();
        Ok(ClassifierModel { arch: self.arch.clone(), stages: self.stages.clone(), params })
    }

    /// Returns a model with parameters `θ + epsilon · direction`; `self` is untouched.
    pub fn perturb(&self, direction: &GradientVector<T>, epsilon: T) -> Result<Self> {
        self.param_vector().check_structure(direction)?;
        let mut out = self.clone();
        for (p, d) in out.params.iter_mut().zip(direction.groups()) {
            for (v, &dv) in p.iter_mut().zip(d) {
                *v += epsilon * dv;
            }
        }
        Ok(out)
    }

    fn check_images(&self, images: &ImageBatch<T>) -> Result<()> {
        if images.shape() != self.arch.input {
            return Err(Error::shape(self.arch.input, images.shape()));
        }
        Ok(())
    }

    fn check_batch(&self, batch: &WeightedBatch<T>) -> Result<()> {
        self.check_images(&batch.images)?;
        if let Some(&bad) = batch.labels.iter().find(|&&l| l >= self.arch.classes) {
            return Err(Error::input(format!("label {bad} out of range for {} classes", self.arch.classes)));
        }
        Ok(())
    }

    fn stage_forward(&self, stage: &Stage, input: &[T]) -> Vec<T> {
        let params = stage.group.map(|g| self.params[g].as_slice()).unwrap_or(&[]);
        match stage.spec {
            LayerSpec::Dense { outputs } => layers::dense_forward(params, input, outputs),
            LayerSpec::Conv { out_channels, kernel } => {
                layers::conv_forward(params, input, stage.input, out_channels, kernel)
            }
            LayerSpec::Act { activation } => layers::activation_forward(activation, input),
            LayerSpec::Pool { pool, size } => layers::pool_forward(pool, size, input, stage.input),
        }
    }

    /// Forward pass keeping every intermediate activation; `acts[0]` is the input.
    fn forward_cached(&self, x: &[T], upto: usize) -> Vec<Vec<T>> {
        let mut acts = Vec::with_capacity(upto + 1);
        acts.push(x.to_vec());
        for stage in &self.stages[..upto] {
            let next = self.stage_forward(stage, acts.last().expect("non-empty"));
            acts.push(next);
        }
        acts
    }

    /// Backpropagates `dout` from the output of stage `upto - 1` down to the
    /// input. Parameter gradients are accumulated into `grads` when given.
    fn backward(
        &self,
        acts: &[Vec<T>],
        upto: usize,
        mut dout: Vec<T>,
        mut grads: Option<&mut GradientVector<T>>,
        want_input: bool,
    ) -> Option<Vec<T>> {
        for k in (0..upto).rev() {
            let stage = &self.stages[k];
            let need_din = want_input || k > 0;
            let input = &acts[k];
            let params = stage.group.map(|g| self.params[g].as_slice()).unwrap_or(&[]);
            let grad_slot = match (stage.group, grads.as_deref_mut()) {
                (Some(g), Some(gv)) => Some(gv.groups_mut()[g].as_mut_slice()),
                _ => None,
            };
            if grad_slot.is_none() && !need_din {
                break;
            }
            let din = match stage.spec {
                LayerSpec::Dense { .. } => layers::dense_backward(params, input, &dout, grad_slot, need_din),
                LayerSpec::Conv { kernel, .. } => {
                    layers::conv_backward(params, input, stage.input, kernel, &dout, grad_slot, need_din)
                }
                LayerSpec::Act { activation } => {
                    Some(layers::activation_backward(activation, input, &acts[k + 1], &dout))
                }
                LayerSpec::Pool { pool, size } => Some(layers::pool_backward(pool, size, input, stage.input, &dout)),
            };
            {
                let d = din?;
                dout = d
            }
        }
        want_input.then_some(dout)
    }

    fn sample_pass(
        &self,
        x: &[T],
        label: usize,
        weight: T,
        grads: Option<&mut GradientVector<T>>,
        want_input: bool,
    ) -> SamplePass<T> {
        let n = self.stages.len();
        let acts = self.forward_cached(x, n);
        let logits = &acts[n];
        let (log_probs, probs) = log_softmax(logits);
        let floor = T::lit(PROBABILITY_FLOOR.ln());
        let logp = log_probs[label];
        let zero_input = || want_input.then(|| vec![T::zero(); x.len()]);
        if logp < floor {
            // clamped: constant loss, zero gradient
            return SamplePass { loss: -weight * floor, input_grad: zero_input() };
        }
        let loss = -weight * logp;
        if weight == T::zero() {
            return SamplePass { loss, input_grad: zero_input() };
        }
        let mut dlogits: Vec<T> = probs.iter().map(|&p| weight * p).collect();
        dlogits[label] -= weight;
        let input_grad = self.backward(&acts, n, dlogits, grads, want_input);
        SamplePass { loss, input_grad }
    }

    /// Row-stochastic matrix of class probabilities, one row per image.
    pub fn forward(&self, images: &ImageBatch<T>) -> Result<Matrix<T>> {
        self.check_images(images)?;
        let n = self.stages.len();
        let mut data = Vec::with_capacity(images.len() * self.arch.classes);
        for x in images.iter() {
            let acts = self.forward_cached(x, n);
            data.extend(log_softmax(&acts[n]).1);
        }
        Matrix::new(images.len(), self.arch.classes, data)
    }

    pub fn logits(&self, images: &ImageBatch<T>) -> Result<Matrix<T>> {
        self.check_images(images)?;
        let n = self.stages.len();
        let mut data = Vec::with_capacity(images.len() * self.arch.classes);
        for x in images.iter() {
            let mut acts = self.forward_cached(x, n);
            data.append(&mut acts[n]);
        }
        Matrix::new(images.len(), self.arch.classes, data)
    }

    /// Encoder output `f(x)` for every image.
    pub fn encode(&self, images: &ImageBatch<T>) -> Result<Matrix<T>> {
        self.check_images(images)?;
        let enc = self.stages.len() - 1;
        let mut data = Vec::with_capacity(images.len() * self.feature_dim());
        for x in images.iter() {
            let mut acts = self.forward_cached(x, enc);
            data.append(&mut acts[enc]);
        }
        Matrix::new(images.len(), self.feature_dim(), data)
    }

    /// Applies the final dense layer and softmax to encoder features.
    pub fn head_forward(&self, features: &Matrix<T>) -> Result<Matrix<T>> {
        if features.cols() != self.feature_dim() {
            return Err(Error::shape(self.feature_dim(), features.cols()));
        }
        let head = self.stages.last().expect("at least one layer");
        let mut data = Vec::with_capacity(features.rows() * self.arch.classes);
        for z in features.iter_rows() {
            data.extend(log_softmax(&self.stage_forward(head, z)).1);
        }
        Matrix::new(features.rows(), self.arch.classes, data)
    }

    /// Pulls a feature-space gradient `dz` back to the input image.
    pub fn encode_backward(&self, image: &[T], dz: &[T]) -> Result<Vec<T>> {
        if image.len() != self.arch.input.numel() {
            return Err(Error::shape(self.arch.input.numel(), image.len()));
        }
        if dz.len() != self.feature_dim() {
            return Err(Error::shape(self.feature_dim(), dz.len()));
        }
        let enc = self.stages.len() - 1;
        let acts = self.forward_cached(image, enc);
        Ok(self.backward(&acts, enc, dz.to_vec(), None, true).expect("input gradient requested"))
    }

    /// `Σ_i w_i · (−log max(p(x_i)_{y_i}, floor))` (sum reduction).
    pub fn weighted_ce_loss(&self, batch: &WeightedBatch<T>) -> Result<T> {
        self.check_batch(batch)?;
        let n = self.stages.len();
        let floor = T::lit(PROBABILITY_FLOOR.ln());
        let mut total = T::zero();
        for ((x, &y), &w) in batch.images.iter().zip(&batch.labels).zip(&batch.weights) {
            let acts = self.forward_cached(x, n);
            let logp = log_softmax(&acts[n]).0[y];
            total += -w * logp.max(floor);
        }
        finite_or(total, "weighted cross-entropy loss")
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_param_gradients(&self, batch: &WeightedBatch<T>) -> Result<(T, GradientVector<T>)> {
        self.check_batch(batch)?;
        let mut grads = GradientVector::zeros(&self.group_sizes());
        let mut total = T::zero();
        for ((x, &y), &w) in batch.images.iter().zip(&batch.labels).zip(&batch.weights) {
            total += self.sample_pass(x, y, w, Some(&mut grads), false).loss;
        }
        let total = finite_or(total, "weighted cross-entropy loss")?;
        if !grads.is_finite() {
            return Err(Error::numeric("non-finite parameter gradient"));
        }
        Ok((total, grads))
    }

    pub fn param_gradients(&self, batch: &WeightedBatch<T>) -> Result<GradientVector<T>> {
        self.loss_and_param_gradients(batch).map(|(_, g)| g)
    }

    /// Gradient of the weighted loss with respect to every image entry.
    pub fn input_gradients(&self, batch: &WeightedBatch<T>) -> Result<ImageBatch<T>> {
        self.check_batch(batch)?;
        let mut out = ImageBatch::zeros(batch.images.shape(), batch.len());
        let mut total = T::zero();
        for (i, ((x, &y), &w)) in batch.images.iter().zip(&batch.labels).zip(&batch.weights).enumerate() {
            let pass = self.sample_pass(x, y, w, None, true);
            total += pass.loss;
            out.image_mut(i).copy_from_slice(&pass.input_grad.expect("input gradient requested"));
        }
        finite_or(total, "weighted cross-entropy loss")?;
        if !out.is_finite() {
            return Err(Error::numeric("non-finite input gradient"));
        }
        Ok(out)
    }

    /// Gradient of one sample's loss w.r.t. parameters (used by GSS scoring).
    pub fn sample_param_gradient(&self, image: &[T], label: usize, weight: T) -> Result<GradientVector<T>> {
        if image.len() != self.arch.input.numel() {
            return Err(Error::shape(self.arch.input.numel(), image.len()));
        }
        if label >= self.arch.classes {
            return Err(Error::input(format!("label {label} out of range")));
        }
        let mut grads = GradientVector::zeros(&self.group_sizes());
        let pass = self.sample_pass(image, label, weight, Some(&mut grads), false);
        finite_or(pass.loss, "sample loss")?;
        Ok(grads)
    }
}

fn finite_or<T: Scalar>(v: T, what: &str) -> Result<T> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::numeric(format!("{what} is {v}")))
    }
}

/// Returns `(log_softmax, softmax)` computed with the max-shift trick.
pub(crate) fn log_softmax<T: Scalar>(logits: &[T]) -> (Vec<T>, Vec<T>) {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let shifted: Vec<T> = logits.iter().map(|&z| z - m).collect();
    let lse = shifted.iter().map(|&s| s.exp()).sum::<T>().ln();
    let logp: Vec<T> = shifted.iter().map(|&s| s - lse).collect();
    let p = logp.iter().map(|&l| l.exp()).collect();
    (logp, p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_mlp() -> ClassifierModel<f64> {
        ClassifierModel::reinitialize(&Architecture::mlp(4, &[5], 3, Activation::Tanh), 11).unwrap()
    }

    fn batch(n: usize, dim: usize, classes: usize, seed: u64) -> WeightedBatch<f64> {
        use rand::Rng;
        let mut r = rng::rng(seed);
        let data = (0..n * dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let labels = (0..n).map(|i| i % classes).collect();
        let weights = (0..n).map(|_| r.random_range(0.1..1.0)).collect();
        WeightedBatch::new(ImageBatch::new(Shape::flat(dim), data).unwrap(), labels, weights).unwrap()
    }

    #[test]
    fn zero_linear_model_is_uniform() {
        let m = ClassifierModel::<f64>::zeros(Architecture::linear(Shape::flat(3), 2)).unwrap();
        let x = ImageBatch::new(Shape::flat(3), vec![1.0, -2.0, 3.0, 0.5, 0.5, 0.5]).unwrap();
        let p = m.forward(&x).unwrap();
        for row in p.iter_rows() {
            assert_eq!(row, &[0.5, 0.5]);
        }
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let m = tiny_mlp();
        let x = ImageBatch::new(Shape::flat(5), vec![0.0; 5]).unwrap();
        assert!(matches!(m.forward(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn identical_images_give_identical_rows() {
        let m = tiny_mlp();
        let x = ImageBatch::new(Shape::flat(4), [0.3, -0.1, 0.7, 0.2].repeat(4)).unwrap();
        let p = m.forward(&x).unwrap();
        for r in 1..4 {
            assert_eq!(p.row(0), p.row(r));
        }
        let s: f64 = p.row(0).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_is_input_error() {
        let m = tiny_mlp();
        let mut b = batch(2, 4, 3, 1);
        b.labels[1] = 3;
        assert!(matches!(m.weighted_ce_loss(&b), Err(Error::Input(_))));
    }

    #[test]
    fn zero_weights_give_zero_loss_and_gradient() {
        let m = tiny_mlp();
        let mut b = batch(3, 4, 3, 2);
        b.weights = vec![0.0; 3];
        assert_eq!(m.weighted_ce_loss(&b).unwrap(), 0.0);
        assert!(m.param_gradients(&b).unwrap().flatten().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn doubling_weights_doubles_gradient() {
        let m = tiny_mlp();
        let b = batch(5, 4, 3, 3);
        let mut b2 = b.clone();
        b2.weights.iter_mut().for_each(|w| *w *= 2.0);
        let g1 = m.param_gradients(&b).unwrap().flatten();
        let g2 = m.param_gradients(&b2).unwrap().flatten();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-6 * b.abs().max(1e-12));
        }
    }

    #[test]
    fn zero_head_gives_zero_input_gradient() {
        let mut m = tiny_mlp();
        let last = m.params().len() - 1;
        m.params_mut()[last].iter_mut().for_each(|v| *v = 0.0);
        let g = m.input_gradients(&batch(3, 4, 3, 4)).unwrap();
        assert_eq!(g.shape(), Shape::flat(4));
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn perturb_is_linear_and_reversible() {
        let m = tiny_mlp();
        let d = ClassifierModel::<f64>::reinitialize(m.architecture(), 99).unwrap().param_vector();
        assert_eq!(m.perturb(&d, 0.0).unwrap(), m);
        let back = m.perturb(&d, 0.37).unwrap().perturb(&d, -0.37).unwrap();
        for (a, b) in back.param_vector().flatten().iter().zip(m.param_vector().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        let p = m.perturb(&d, -0.5).unwrap();
        let mut diff = p.param_vector();
        diff.axpy(-1.0, &m.param_vector());
        assert!((diff.norm() - 0.5 * d.norm()).abs() < 1e-12);
    }

    #[test]
    fn perturb_rejects_foreign_direction() {
        let m = tiny_mlp();
        let d = GradientVector::<f64>::zeros(&[3, 4]);
        assert!(m.perturb(&d, 1.0).is_err());
    }

    #[test]
    fn reinitialize_is_seed_deterministic() {
        let arch = Architecture::convnet(Shape::new(2, 8, 8), &[3, 4], 5);
        let a = ClassifierModel::<f64>::reinitialize(&arch, 5).unwrap();
        let b = ClassifierModel::<f64>::reinitialize(&arch, 5).unwrap();
        let c = ClassifierModel::<f64>::reinitialize(&arch, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.param_vector(), c.param_vector());
        assert_eq!(a.param_count(), arch.param_count().unwrap());
    }

    #[test]
    fn encode_then_head_equals_forward() {
        let arch = Architecture::convnet(Shape::new(2, 8, 8), &[3, 4], 5);
        let m = ClassifierModel::<f64>::reinitialize(&arch, 8).unwrap();
        let x = ImageBatch::new(Shape::new(2, 8, 8), (0..256).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        let z = m.encode(&x).unwrap();
        assert_eq!(z.cols(), arch.feature_dim().unwrap());
        assert_eq!(z.cols(), 4 * 2 * 2);
        let via_head = m.head_forward(&z).unwrap();
        let direct = m.forward(&x).unwrap();
        for (a, b) in via_head.as_slice().iter().zip(direct.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn architecture_requires_class_head() {
        let mut arch = Architecture::mlp(3, &[4], 2, Activation::Relu);
        arch.layers.pop();
        assert!(arch.validate().is_err());
        let even = Architecture {
            input: Shape::new(1, 4, 4),
            classes: 2,
            layers: vec![LayerSpec::Conv { out_channels: 2, kernel: 2 }, LayerSpec::Dense { outputs: 2 }],
        };
        assert!(even.validate().is_err());
    }
}
