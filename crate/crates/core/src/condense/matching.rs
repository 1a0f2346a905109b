//! Gradient-matching distance and its gradient with respect to synthetic pixels.

use crate::dual::Dual;
use crate::error::{Error, Result};
use crate::model::{ClassifierModel, GradientVector, WeightedBatch};
use crate::scalar::Scalar;
use crate::tensor::{dot, norm, ImageBatch};

use super::{DistanceMetric, EpsilonRule};

/// Σ over layer groups of `1 − cos(g_syn, g_real)`; a group where either
/// side has zero norm contributes 1.
pub fn matching_distance<T: Scalar>(g_syn: &GradientVector<T>, g_real: &GradientVector<T>) -> Result<T> {
    distance(DistanceMetric::Cosine, g_syn, g_real)
}

pub fn distance<T: Scalar>(metric: DistanceMetric, g_syn: &GradientVector<T>, g_real: &GradientVector<T>) -> Result<T> {
    g_syn.check_structure(g_real)?;
    let mut total = T::zero();
    for (l, (s, r)) in g_syn.groups().iter().zip(g_real.groups()).enumerate() {
        total += match metric {
            DistanceMetric::Cosine => {
                let (ns, nr) = (norm(s), norm(r));
                if ns == T::zero() || nr == T::zero() {
                    log::warn!("layer group {l} has a zero-norm gradient; counted as unmatched");
                    T::one()
                } else {
                    T::one() - dot(s, r) / (ns * nr)
                }
            }
            DistanceMetric::SquaredEuclidean => s.iter().zip(r).map(|(&a, &b)| (a - b) * (a - b)).sum(),
        };
    }
    Ok(total)
}

/// Closed-form `∂D/∂g_syn`, per group
/// `−(g_real/(‖g_syn‖‖g_real‖) − cos · g_syn/‖g_syn‖²)`.
/// A zero-norm `g_real` group yields a zero gradient for that group.
pub fn distance_grad_wrt_gsyn<T: Scalar>(
    g_syn: &GradientVector<T>,
    g_real: &GradientVector<T>,
) -> Result<GradientVector<T>> {
    distance_grad(DistanceMetric::Cosine, g_syn, g_real)
}

pub fn distance_grad<T: Scalar>(
    metric: DistanceMetric,
    g_syn: &GradientVector<T>,
    g_real: &GradientVector<T>,
) -> Result<GradientVector<T>> {
    g_syn.check_structure(g_real)?;
    let mut groups = Vec::with_capacity(g_syn.groups().len());
    for (l, (s, r)) in g_syn.groups().iter().zip(g_real.groups()).enumerate() {
        groups.push(match metric {
            DistanceMetric::Cosine => {
                let (ns, nr) = (norm(s), norm(r));
                if ns == T::zero() {
                    return Err(Error::numeric(format!("synthetic gradient of layer group {l} has zero norm")));
                }
                if nr == T::zero() {
                    vec![T::zero(); s.len()]
                } else {
                    let cos = dot(s, r) / (ns * nr);
                    let (a, b) = (T::one() / (ns * nr), cos / (ns * ns));
                    s.iter().zip(r).map(|(&si, &ri)| b * si - a * ri).collect()
                }
            }
            DistanceMetric::SquaredEuclidean => s.iter().zip(r).map(|(&a, &b)| T::lit(2.0) * (a - b)).collect(),
        });
    }
    Ok(GradientVector::new(groups))
}

/// Result of one matching-gradient evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchStep<T> {
    /// `∂D/∂X'`, one image per synthetic sample.
    pub grad: ImageBatch<T>,
    /// Matching distance at the evaluation model.
    pub distance: T,
    /// Finite-difference step; `None` for exact evaluation or a skipped step.
    pub epsilon: Option<T>,
    /// True when `∂D/∂g_syn` vanished (or `g_syn` was zero) and the gradient is zero.
    pub skipped: bool,
}

fn matched_gradients<T: Scalar>(
    theta: &ClassifierModel<T>,
    syn: &WeightedBatch<T>,
    real: &WeightedBatch<T>,
) -> Result<(GradientVector<T>, GradientVector<T>)> {
    if syn.is_empty() || real.is_empty() {
        return Err(Error::input("matching needs non-empty synthetic and real batches"));
    }
    Ok((theta.param_gradients(syn)?, theta.param_gradients(real)?))
}

fn skipped<T: Scalar>(syn: &WeightedBatch<T>, distance: T) -> MatchStep<T> {
    MatchStep { grad: ImageBatch::zeros(syn.images.shape(), syn.len()), distance, epsilon: None, skipped: true }
}

/// Direction `v = ∂D/∂g_syn`, or `None` when the step must be skipped.
fn direction<T: Scalar>(
    metric: DistanceMetric,
    g_syn: &GradientVector<T>,
    g_real: &GradientVector<T>,
) -> Result<Option<GradientVector<T>>> {
    match distance_grad(metric, g_syn, g_real) {
        Ok(v) if v.norm() == T::zero() => Ok(None),
        Ok(v) if !v.is_finite() => Err(Error::numeric("non-finite distance gradient")),
        Ok(v) => Ok(Some(v)),
        Err(Error::Numeric(msg)) => {
            log::debug!("matching step skipped: {msg}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Matching gradient with the second-order term replaced by a central
/// difference of input gradients at `θ ± εv`. Memory is a few copies of θ
/// plus a few copies of `X'`.
pub fn fd_match_gradient<T: Scalar>(
    theta: &ClassifierModel<T>,
    syn: &WeightedBatch<T>,
    real: &WeightedBatch<T>,
    metric: DistanceMetric,
    rule: EpsilonRule,
) -> Result<MatchStep<T>> {
    let (g_syn, g_real) = matched_gradients(theta, syn, real)?;
    let d = distance(metric, &g_syn, &g_real)?;
    let v = direction(metric, &g_syn, &g_real)?;
    drop((g_syn, g_real));
    let Some(v) = v else {
        return Ok(skipped(syn, d));
    };
    let eps = rule.epsilon(v.norm());
    let plus = theta.perturb(&v, eps)?.input_gradients(syn)?;
    let minus = theta.perturb(&v, -eps)?.input_gradients(syn)?;
    let inv = T::one() / (eps + eps);
    let mut grad = plus;
    for (g, &m) in grad.as_mut_slice().iter_mut().zip(minus.as_slice()) {
        *g = (*g - m) * inv;
    }
    if !grad.is_finite() {
        return Err(Error::numeric("non-finite finite-difference matching gradient"));
    }
    Ok(MatchStep { grad, distance: d, epsilon: Some(eps), skipped: false })
}

/// Matching gradient with the exact mixed second derivative, obtained by
/// pushing the tangent `v` through an input-gradient pass in dual numbers.
pub fn exact_match_gradient<T: Scalar>(
    theta: &ClassifierModel<T>,
    syn: &WeightedBatch<T>,
    real: &WeightedBatch<T>,
    metric: DistanceMetric,
) -> Result<MatchStep<T>> {
    let (g_syn, g_real) = matched_gradients(theta, syn, real)?;
    let d = distance(metric, &g_syn, &g_real)?;
    let Some(v) = direction(metric, &g_syn, &g_real)? else {
        return Ok(skipped(syn, d));
    };
    let lifted = theta.with_tangent(&v)?;
    let dual_batch = WeightedBatch {
        images: syn.images.map(Dual::constant),
        labels: syn.labels.clone(),
        weights: syn.weights.iter().map(|&w| Dual::constant(w)).collect(),
    };
    let grad = lifted.input_gradients(&dual_batch)?.map(|x| x.eps);
    if !grad.is_finite() {
        return Err(Error::numeric("non-finite exact matching gradient"));
    }
    Ok(MatchStep { grad, distance: d, epsilon: None, skipped: false })
}
