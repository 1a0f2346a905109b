//! Selection-based replay buffers sharing one offer/train interface.
//!
//! Every policy stores raw stream samples with their pseudo-labels; none
//! synthesises data. Capacity is global (no per-class quota).

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::labeling::PseudoLabeledSample;
use crate::model::{ClassifierModel, WeightedBatch};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{dot, norm, ImageBatch, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Policy {
    Random,
    Fifo,
    SelectiveBp,
    KCenter,
    Gss,
}

impl Policy {
    pub const ALL: [Policy; 5] = [Self::Random, Self::Fifo, Self::SelectiveBp, Self::KCenter, Self::Gss];

    pub fn name(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Fifo => "fifo",
            Self::SelectiveBp => "selective-bp",
            Self::KCenter => "k-center",
            Self::Gss => "gss",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| Error::config(format!("unknown policy {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredSample<T> {
    pub image: Vec<T>,
    pub pseudo_label: usize,
    pub confidence: T,
    /// Global stream position at which the sample arrived.
    pub arrival: usize,
    /// Policy-specific: GSS max similarity, unused otherwise.
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Offer {
    Accepted,
    /// Accepted in place of the sample that arrived at the given position.
    Replaced {
        evicted_arrival: usize,
    },
    Rejected,
}

#[derive(Clone, Debug)]
pub struct SelectionBuffer<T> {
    policy: Policy,
    capacity: usize,
    shape: Shape,
    samples: Vec<StoredSample<T>>,
    seen: usize,
    /// Encoder features (K-Center) or per-sample gradients (GSS), parallel to `samples`.
    embeddings: Vec<Vec<T>>,
    /// GSS pairwise cosine similarities, parallel to `samples`.
    similarity: Vec<Vec<f64>>,
}

fn cosine<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == T::zero() || nb == T::zero() {
        0.0
    } else {
        (dot(a, b) / (na * nb)).real()
    }
}

/// Index of the largest value; ties go to the lowest index.
fn first_max(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn sq_distance<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y).real().powi(2)).sum()
}

impl<T: Scalar> SelectionBuffer<T> {
    pub fn new(policy: Policy, capacity: usize, shape: Shape) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("selection buffer capacity must be at least 1"));
        }
        Ok(Self {
            policy,
            capacity,
            shape,
            samples: Vec::with_capacity(capacity),
            seen: 0,
            embeddings: Vec::new(),
            similarity: Vec::new(),
        })
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[StoredSample<T>] {
        &self.samples
    }

    /// Number of samples offered so far.
    pub fn seen(&self) -> usize {
        self.seen
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for s in &self.samples {
            if s.pseudo_label < classes {
                counts[s.pseudo_label] += 1;
            }
        }
        counts
    }

    fn embed(&self, model: &ClassifierModel<T>, image: &[T], label: usize) -> Result<Vec<T>> {
        match self.policy {
            Policy::KCenter => {
                let batch = ImageBatch::new(self.shape, image.to_vec())?;
                Ok(model.encode(&batch)?.row(0).to_vec())
            }
            Policy::Gss => Ok(model.sample_param_gradient(image, label, T::one())?.flatten()),
            _ => Ok(Vec::new()),
        }
    }

    /// Recomputes cached features or gradients under a new deployed model.
    pub fn refresh(&mut self, model: &ClassifierModel<T>) -> Result<()> {
        if !matches!(self.policy, Policy::KCenter | Policy::Gss) {
            return Ok(());
        }
        let embeddings =
            self.samples.iter().map(|s| self.embed(model, &s.image, s.pseudo_label)).collect::<Result<Vec<_>>>()?;
        self.embeddings = embeddings;
        if self.policy == Policy::Gss {
            let n = self.samples.len();
            self.similarity = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..i {
                    let c = cosine(&self.embeddings[i], &self.embeddings[j]);
                    self.similarity[i][j] = c;
                    self.similarity[j][i] = c;
                }
            }
            self.update_gss_scores();
        }
        Ok(())
    }

    fn update_gss_scores(&mut self) {
        let n = self.samples.len();
        for i in 0..n {
            self.samples[i].score =
                (0..n).filter(|&j| j != i).map(|j| self.similarity[i][j]).fold(f64::NEG_INFINITY, f64::max);
        }
    }

    fn insert(&mut self, at: Option<usize>, sample: StoredSample<T>, embedding: Vec<T>) -> Offer {
        let gss = self.policy == Policy::Gss;
        let sims: Vec<f64> = if gss { self.embeddings.iter().map(|e| cosine(e, &embedding)).collect() } else { vec![] };
        let offer = match at {
            None => {
                self.samples.push(sample);
                if !embedding.is_empty() {
                    self.embeddings.push(embedding);
                }
                if gss {
                    for (row, &c) in self.similarity.iter_mut().zip(&sims) {
                        row.push(c);
                    }
                    let mut own = sims;
                    own.push(0.0);
                    self.similarity.push(own);
                }
                Offer::Accepted
            }
            Some(j) => {
                let evicted = std::mem::replace(&mut self.samples[j], sample).arrival;
                if !embedding.is_empty() {
                    self.embeddings[j] = embedding;
                }
                if gss {
                    for (i, &c) in sims.iter().enumerate() {
                        if i != j {
                            self.similarity[i][j] = c;
                            self.similarity[j][i] = c;
                        }
                    }
                }
                Offer::Replaced { evicted_arrival: evicted }
            }
        };
        if gss {
            self.update_gss_scores();
        }
        offer
    }

    /// Offers one sample. `arrival` is its global stream position and
    /// `model` the deployed model (used by K-Center and GSS).
    pub fn policy_offer(
        &mut self,
        sample: &PseudoLabeledSample<T>,
        arrival: usize,
        model: &ClassifierModel<T>,
        rng: &mut Rng,
    ) -> Result<Offer> {
        if sample.image.len() != self.shape.numel() {
            return Err(Error::shape(self.shape.numel(), sample.image.len()));
        }
        self.seen += 1;
        let stored = StoredSample {
            image: sample.image.clone(),
            pseudo_label: sample.pseudo_label,
            confidence: sample.confidence,
            arrival,
            score: 0.0,
        };
        let full = self.samples.len() >= self.capacity;
        let embedding = match self.policy {
            Policy::KCenter | Policy::Gss => self.embed(model, &sample.image, sample.pseudo_label)?,
            _ => Vec::new(),
        };
        if !full {
            return Ok(self.insert(None, stored, embedding));
        }
        let slot = match self.policy {
            Policy::Random => {
                let j = rng.random_range(0..self.seen);
                (j < self.capacity).then_some(j)
            }
            Policy::Fifo => self.samples.iter().enumerate().min_by_key(|(_, s)| s.arrival).map(|(i, _)| i),
            Policy::SelectiveBp => {
                let j = first_max(self.samples.iter().map(|s| s.confidence.real()));
                (sample.confidence < self.samples[j].confidence).then_some(j)
            }
            Policy::KCenter => self.k_center_victim(&embedding),
            Policy::Gss => {
                let incoming = self.embeddings.iter().map(|e| cosine(e, &embedding)).fold(f64::NEG_INFINITY, f64::max);
                let j = first_max(self.samples.iter().map(|s| s.score));
                (self.samples[j].score > incoming).then_some(j)
            }
        };
        Ok(match slot {
            Some(j) => self.insert(Some(j), stored, embedding),
            None => Offer::Rejected,
        })
    }

    /// Greedy covering-radius swap. Keeping the buffer leaves the incoming
    /// point at distance `d(x, S)` from its nearest centre; swapping out `s_j`
    /// leaves `s_j` at distance `d(s_j, S∖{s_j} ∪ {x})`. The swap that
    /// minimises the latter is taken iff it beats the former.
    fn k_center_victim(&self, x: &[T]) -> Option<usize> {
        let e = &self.embeddings;
        let keep = e.iter().map(|s| sq_distance(s, x)).fold(f64::INFINITY, f64::min);
        let mut best: Option<(usize, f64)> = None;
        for j in 0..e.len() {
            let mut r = sq_distance(&e[j], x);
            for (k, other) in e.iter().enumerate() {
                if k != j {
                    r = r.min(sq_distance(&e[j], other));
                }
            }
            if best.is_none_or(|(_, b)| r < b) {
                best = Some((j, r));
            }
        }
        best.filter(|&(_, r)| r < keep).map(|(j, _)| j)
    }

    /// All stored samples as one unit-weight batch labelled by pseudo-label.
    pub fn policy_train_batch(&self) -> Result<WeightedBatch<T>> {
        if self.samples.is_empty() {
            return Err(Error::config("selection buffer is empty; nothing to train on"));
        }
        let images = ImageBatch::from_images(self.shape, self.samples.iter().map(|s| s.image.as_slice()))?;
        WeightedBatch::unweighted(images, self.samples.iter().map(|s| s.pseudo_label).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use crate::rng::rng;

    fn sample(v: f64, label: usize, confidence: f64) -> PseudoLabeledSample<f64> {
        PseudoLabeledSample { image: vec![v, -v], pseudo_label: label, confidence, position: 0 }
    }

    fn model() -> ClassifierModel<f64> {
        ClassifierModel::reinitialize(&Architecture::linear(Shape::flat(2), 2), 1).unwrap()
    }

    fn offer_all(policy: Policy, cap: usize, items: &[PseudoLabeledSample<f64>]) -> SelectionBuffer<f64> {
        let mut b = SelectionBuffer::new(policy, cap, Shape::flat(2)).unwrap();
        let (m, mut r) = (model(), rng(0));
        for (i, s) in items.iter().enumerate() {
            b.policy_offer(s, i, &m, &mut r).unwrap();
            assert!(b.len() <= cap);
        }
        b
    }

    #[test]
    fn fifo_keeps_newest() {
        let b = offer_all(Policy::Fifo, 2, &[sample(1.0, 0, 0.5), sample(2.0, 1, 0.5), sample(3.0, 0, 0.5)]);
        let arrivals: Vec<usize> = b.samples().iter().map(|s| s.arrival).collect();
        let mut sorted = arrivals.clone();
        sorted.sort();
        assert_eq!(sorted, vec![1, 2]);
    }

    #[test]
    fn selective_bp_keeps_least_confident() {
        let b = offer_all(Policy::SelectiveBp, 2, &[sample(1.0, 0, 0.9), sample(2.0, 0, 0.2), sample(3.0, 0, 0.5)]);
        let mut conf: Vec<f64> = b.samples().iter().map(|s| s.confidence).collect();
        conf.sort_by(f64::total_cmp);
        assert_eq!(conf, vec![0.2, 0.5]);
    }

    #[test]
    fn k_center_prefers_spread() {
        let items = [sample(0.0, 0, 0.5), sample(0.01, 0, 0.5), sample(5.0, 1, 0.5), sample(0.02, 0, 0.5)];
        let b = offer_all(Policy::KCenter, 2, &items);
        let mut vs: Vec<f64> = b.samples().iter().map(|s| s.image[0]).collect();
        vs.sort_by(f64::total_cmp);
        assert!(vs[1] == 5.0, "{vs:?}");
    }

    #[test]
    fn gss_scores_are_max_similarity_to_others() {
        let items: Vec<_> = (0..6).map(|i| sample(i as f64 - 2.5, i % 2, 0.5)).collect();
        let b = offer_all(Policy::Gss, 3, &items);
        let m = model();
        let grads: Vec<Vec<f64>> = b
            .samples()
            .iter()
            .map(|s| m.sample_param_gradient(&s.image, s.pseudo_label, 1.0).unwrap().flatten())
            .collect();
        for (i, s) in b.samples().iter().enumerate() {
            let want =
                (0..3).filter(|&j| j != i).map(|j| cosine(&grads[i], &grads[j])).fold(f64::NEG_INFINITY, f64::max);
            assert!((s.score - want).abs() < 1e-12);
        }
    }

    #[test]
    fn train_batch_mirrors_contents() {
        let b = offer_all(Policy::Random, 3, &[sample(1.0, 1, 0.3), sample(2.0, 0, 0.4)]);
        let batch = b.policy_train_batch().unwrap();
        assert_eq!(batch.len(), 2);
        assert!(batch.weights.iter().all(|&w| w == 1.0));
        assert_eq!(batch.labels, b.samples().iter().map(|s| s.pseudo_label).collect::<Vec<_>>());
        let empty = SelectionBuffer::<f64>::new(Policy::Fifo, 2, Shape::flat(2)).unwrap();
        assert!(matches!(empty.policy_train_batch(), Err(Error::Config(_))));
    }

    #[test]
    fn policy_names_round_trip() {
        for p in Policy::ALL {
            assert_eq!(p.name().parse::<Policy>().unwrap(), p);
        }
        assert!("deco".parse::<Policy>().is_err());
    }
}
