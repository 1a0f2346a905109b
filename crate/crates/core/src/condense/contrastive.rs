//! Class-purity term over buffer features.
//!
//! For each anchor `i` the loss is `LSE_n(z_i·z_n/τ) − mean_p(z_i·z_p/τ)`,
//! with positives the other slots of the anchor's class and negatives every
//! slot of one randomly drawn other class. The denominator holds negatives
//! only.

use rand::Rng as _;

use crate::buffer::CondensedBuffer;
use crate::error::{Error, Result};
use crate::model::ClassifierModel;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{dot, norm, ImageBatch};

/// Anchors with their positive and negative slot sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContrastiveIndexing {
    pub anchors: Vec<usize>,
    pub positives: Vec<Vec<usize>>,
    pub negative_class: Vec<usize>,
    pub negatives: Vec<Vec<usize>>,
}

impl ContrastiveIndexing {
    /// Draws one negative class per anchor, uniformly among the other classes.
    pub fn draw(labels: &[usize], classes: usize, anchors: &[usize], seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::config("contrastive term needs at least two classes"));
        }
        let mut by_class = vec![Vec::new(); classes];
        for (slot, &l) in labels.iter().enumerate() {
            by_class.get_mut(l).ok_or_else(|| Error::input(format!("label {l} out of range")))?.push(slot);
        }
        let mut r = rng::rng(seed);
        let mut out = Self { anchors: anchors.to_vec(), positives: vec![], negative_class: vec![], negatives: vec![] };
        for &i in anchors {
            let y = *labels.get(i).ok_or_else(|| Error::input(format!("anchor slot {i} out of range")))?;
            let mut neg = r.random_range(0..classes - 1);
            if neg >= y {
                neg += 1;
            }
            out.positives.push(by_class[y].iter().copied().filter(|&j| j != i).collect());
            out.negative_class.push(neg);
            out.negatives.push(by_class[neg].clone());
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveOutput<T> {
    pub loss: T,
    /// Gradient w.r.t. each anchor image, in anchor order.
    pub grad: ImageBatch<T>,
    pub indexing: Option<ContrastiveIndexing>,
}

/// Loss and pixel gradient for the given anchor slots, through the frozen
/// `model`'s encoder. Gradients reaching non-anchor slots are dropped.
pub fn contrastive_loss_and_grad<T: Scalar>(
    model: &ClassifierModel<T>,
    buffer: &CondensedBuffer<T>,
    anchors: &[usize],
    tau: f64,
    normalize_features: bool,
    seed: u64,
) -> Result<ContrastiveOutput<T>> {
    if !(tau > 0.0) {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    let zero =
        ContrastiveOutput { loss: T::zero(), grad: ImageBatch::zeros(buffer.shape(), anchors.len()), indexing: None };
    if buffer.ipc() < 2 || buffer.classes() < 2 || anchors.is_empty() {
        return Ok(zero);
    }
    let idx = ContrastiveIndexing::draw(buffer.labels(), buffer.classes(), anchors, seed)?;

    // Encode only the slots the loss touches.
    let mut row_of = vec![usize::MAX; buffer.len()];
    let mut needed = Vec::new();
    for slot in anchors.iter().chain(idx.positives.iter().flatten()).chain(idx.negatives.iter().flatten()) {
        if row_of[*slot] == usize::MAX {
            row_of[*slot] = needed.len();
            needed.push(*slot);
        }
    }
    let raw = model.encode(&buffer.images().select(&needed))?;
    let norms: Vec<T> = raw.iter_rows().map(norm).collect();
    let z: Vec<Vec<T>> = raw
        .iter_rows()
        .zip(&norms)
        .map(|(f, &n)| {
            if normalize_features {
                let n = if n > T::zero() { n } else { T::one() };
                f.iter().map(|&v| v / n).collect()
            } else {
                f.to_vec()
            }
        })
        .collect();

    let inv_tau = T::one() / T::lit(tau);
    let dim = model.feature_dim();
    let mut dz = vec![vec![T::zero(); dim]; needed.len()];
    let mut loss = T::zero();
    for (k, &i) in anchors.iter().enumerate() {
        let zi = &z[row_of[i]];
        let pos = &idx.positives[k];
        let neg = &idx.negatives[k];
        let inv_p = T::one() / T::from_usize_lossy(pos.len());
        let s_n: Vec<T> = neg.iter().map(|&n| dot(zi, &z[row_of[n]]) * inv_tau).collect();
        let m = s_n.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = s_n.iter().map(|&s| (s - m).exp()).collect();
        let total: T = e.iter().copied().sum();
        let lse = m + total.ln();
        let mean_pos = pos.iter().map(|&p| dot(zi, &z[row_of[p]])).sum::<T>() * inv_tau * inv_p;
        loss += lse - mean_pos;

        let mut d_anchor = vec![T::zero(); dim];
        for &p in pos {
            let zp = &z[row_of[p]];
            for d in 0..dim {
                d_anchor[d] -= zp[d] * inv_tau * inv_p;
                dz[row_of[p]][d] -= zi[d] * inv_tau * inv_p;
            }
        }
        for (&n, &en) in neg.iter().zip(&e) {
            let w = en / total * inv_tau;
            let zn = &z[row_of[n]];
            for d in 0..dim {
                d_anchor[d] += w * zn[d];
                dz[row_of[n]][d] += w * zi[d];
            }
        }
        for d in 0..dim {
            dz[row_of[i]][d] += d_anchor[d];
        }
    }
    if !loss.is_finite() {
        return Err(Error::numeric(format!("contrastive loss is {loss}")));
    }

    let mut grad = ImageBatch::zeros(buffer.shape(), anchors.len());
    for (k, &i) in anchors.iter().enumerate() {
        let row = row_of[i];
        let mut df = dz[row].clone();
        if normalize_features && norms[row] > T::zero() {
            let proj = dot(&df, &z[row]);
            for (g, &zz) in df.iter_mut().zip(&z[row]) {
                *g = (*g - proj * zz) / norms[row];
            }
        }
        let dx = model.encode_backward(buffer.images().image(i), &df)?;
        grad.image_mut(k).copy_from_slice(&dx);
    }
    if !grad.is_finite() {
        return Err(Error::numeric("non-finite contrastive gradient"));
    }
    Ok(ContrastiveOutput { loss, grad, indexing: Some(idx) })
}
