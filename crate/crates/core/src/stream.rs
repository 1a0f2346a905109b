//! Temporally correlated, unlabeled input stream.
//!
//! The stream is a concatenation of class runs: each run picks a class
//! uniformly among the eligible classes other than the previous run's class
//! and emits `stc` consecutive samples of it. The sequence is then cut into
//! fixed-size segments; segment boundaries ignore run boundaries.
//!
//! Ground-truth labels travel with each segment for evaluation only. Code on
//! the learner path takes `segment.images()` and nothing else.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::ImageBatch;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamSpec {
    /// Run length of consecutive same-class samples.
    pub stc: usize,
    pub segment_size: usize,
    pub total_length: usize,
    pub seed: u64,
    /// Draw samples with replacement instead of consuming each one once.
    pub with_replacement: bool,
}

impl StreamSpec {
    pub fn new(stc: usize, segment_size: usize, total_length: usize, seed: u64) -> Self {
        Self { stc, segment_size, total_length, seed, with_replacement: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stc == 0 {
            return Err(Error::config("STC must be at least 1"));
        }
        if self.segment_size == 0 {
            return Err(Error::config("segment size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamSegment<T> {
    index: usize,
    images: ImageBatch<T>,
    hidden_labels: Vec<usize>,
    source: Vec<usize>,
    short: bool,
}

impl<T: Scalar> StreamSegment<T> {
    pub fn index(&self) -> usize {
        self.index
    }

    /// The unlabeled images; the only learner-facing view of a segment.
    pub fn images(&self) -> &ImageBatch<T> {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// True for a trailing segment shorter than the configured size.
    pub fn is_short(&self) -> bool {
        self.short
    }

    /// Ground truth, for metrics and diagnostics only.
    pub fn hidden_labels_for_evaluation(&self) -> &[usize] {
        &self.hidden_labels
    }

    /// Dataset indices the segment was drawn from.
    pub fn source_indices(&self) -> &[usize] {
        &self.source
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stream<T> {
    pub segments: Vec<StreamSegment<T>>,
}

impl<T: Scalar> Stream<T> {
    pub fn len(&self) -> usize {
        self.segments.iter().map(StreamSegment::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Hidden labels of the whole stream in arrival order.
    pub fn hidden_labels_for_evaluation(&self) -> Vec<usize> {
        self.segments.iter().flat_map(|s| s.hidden_labels.iter().copied()).collect()
    }

    /// Copy with hidden labels replaced by random classes. Used to audit that
    /// the learner never depends on ground truth.
    pub fn with_scrambled_labels(&self, classes: usize, seed: u64) -> Self {
        let mut r = rng::rng(seed);
        let mut out = self.clone();
        for seg in &mut out.segments {
            seg.hidden_labels.iter_mut().for_each(|l| *l = r.random_range(0..classes));
        }
        out
    }
}

/// Chooses the next run's class: uniform over `eligible`, avoiding `previous`
/// unless it is the only option.
fn pick_class(eligible: &[usize], previous: Option<usize>, r: &mut rng::Rng) -> Option<usize> {
    let others: Vec<usize> = eligible.iter().copied().filter(|&c| Some(c) != previous).collect();
    if let Some(&c) = others.choose(r) {
        return Some(c);
    }
    let c = eligible.choose(r).copied();
    if c.is_some() {
        log::warn!("only the previous class can continue; run merges with its predecessor");
    }
    c
}

/// Ordered dataset indices of the stream.
pub fn stream_order<T: Scalar>(spec: &StreamSpec, dataset: &Dataset<T>) -> Result<Vec<usize>> {
    spec.validate()?;
    let mut r = rng::rng(spec.seed);
    let mut pools = dataset.class_indices();
    for p in &mut pools {
        p.shuffle(&mut r);
    }
    let mut order = Vec::with_capacity(spec.total_length);
    let mut previous = None;
    while order.len() < spec.total_length {
        let want = spec.stc.min(spec.total_length - order.len());
        let eligible: Vec<usize> = (0..dataset.classes)
            .filter(|&c| if spec.with_replacement { !pools[c].is_empty() } else { pools[c].len() >= want })
            .collect();
        let class = pick_class(&eligible, previous, &mut r).ok_or_else(|| {
            Error::config(format!(
                "dataset exhausted after {} of {} stream samples (STC {}, no replacement)",
                order.len(),
                spec.total_length,
                spec.stc
            ))
        })?;
        if spec.with_replacement {
            let pool = &pools[class];
            order.extend((0..want).map(|_| pool[r.random_range(0..pool.len())]));
        } else {
            let pool = &mut pools[class];
            order.extend(pool.drain(pool.len() - want..).rev());
        }
        previous = Some(class);
    }
    Ok(order)
}

pub fn build_stream<T: Scalar>(spec: &StreamSpec, dataset: &Dataset<T>) -> Result<Stream<T>> {
    let order = stream_order(spec, dataset)?;
    let segments = order
        .chunks(spec.segment_size)
        .enumerate()
        .map(|(index, chunk)| StreamSegment {
            index,
            images: dataset.images.select(chunk),
            hidden_labels: chunk.iter().map(|&i| dataset.labels[i]).collect(),
            source: chunk.to_vec(),
            short: chunk.len() < spec.segment_size,
        })
        .collect();
    Ok(Stream { segments })
}

/// Lengths of maximal same-label runs.
pub fn run_lengths(labels: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut iter = labels.iter();
    let Some(mut current) = iter.next() else { return out };
    let mut len = 1;
    for l in iter {
        if l == current {
            len += 1;
        } else {
            out.push(len);
            current = l;
            len = 1;
        }
    }
    out.push(len);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blob_dataset;
    use crate::tensor::Shape;

    fn blobs(classes: usize, per_class: usize) -> Dataset<f64> {
        synthetic_blob_dataset(classes, per_class, Shape::flat(2), 4.0, 1).unwrap()
    }

    #[test]
    fn runs_have_exact_length() {
        let d = blobs(4, 300);
        let s = build_stream(&StreamSpec::new(50, 64, 1000, 3), &d).unwrap();
        let runs = run_lengths(&s.hidden_labels_for_evaluation());
        assert_eq!(runs.iter().sum::<usize>(), 1000);
        assert!(runs[..runs.len() - 1].iter().all(|&r| r == 50), "{runs:?}");
        assert!(*runs.last().unwrap() <= 50);
    }

    #[test]
    fn stc_one_alternates_classes() {
        let d = blobs(3, 100);
        let s = build_stream(&StreamSpec::new(1, 10, 200, 4), &d).unwrap();
        assert!(run_lengths(&s.hidden_labels_for_evaluation()).iter().all(|&r| r == 1));
    }

    #[test]
    fn segments_are_fixed_size_with_short_tail() {
        let d = blobs(2, 100);
        let s = build_stream(&StreamSpec::new(10, 30, 100, 5), &d).unwrap();
        assert_eq!(s.segments.len(), 4);
        assert!(s.segments[..3].iter().all(|g| g.len() == 30 && !g.is_short()));
        assert!(s.segments[3].is_short());
        assert_eq!(s.segments[3].len(), 10);
    }

    #[test]
    fn no_repeats_without_replacement() {
        let d = blobs(3, 40);
        let order = stream_order(&StreamSpec::new(10, 7, 120, 6), &d).unwrap();
        let mut sorted = order.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), order.len());
    }

    #[test]
    fn exhaustion_is_config_error() {
        let d = blobs(2, 20);
        let err = stream_order(&StreamSpec::new(10, 5, 100, 1), &d).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let mut spec = StreamSpec::new(10, 5, 100, 1);
        spec.with_replacement = true;
        assert_eq!(stream_order(&spec, &d).unwrap().len(), 100);
    }

    #[test]
    fn zero_stc_rejected() {
        let d = blobs(2, 20);
        assert!(build_stream(&StreamSpec::new(0, 5, 10, 1), &d).is_err());
        assert!(build_stream(&StreamSpec::new(1, 0, 10, 1), &d).is_err());
    }
}
