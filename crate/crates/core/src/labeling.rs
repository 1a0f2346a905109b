//! Pseudo-labels from the deployed model and windowed majority voting.
//!
//! The voting window is the segment. A class is active when its pseudo-label
//! count strictly exceeds `threshold_fraction · window_size`; only samples
//! labelled with an active class, and only the buffer slots of active
//! classes, take part in the segment's update.

use crate::buffer::CondensedBuffer;
use crate::error::Result;
use crate::model::ClassifierModel;
use crate::scalar::Scalar;
use crate::tensor::{argmax, ImageBatch};

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabeledSample<T> {
    pub image: Vec<T>,
    pub pseudo_label: usize,
    /// Probability the model assigned to `pseudo_label`.
    pub confidence: T,
    /// Position of the sample inside its segment.
    pub position: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vote {
    /// Pseudo-label count per class.
    pub counts: Vec<usize>,
    /// Active classes in ascending order.
    pub active: Vec<usize>,
    pub window: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActiveSets<T> {
    pub active_classes: Vec<usize>,
    pub active_stream: Vec<PseudoLabeledSample<T>>,
    /// Buffer slots of the active classes (whole class slices, ascending).
    pub active_synthetic_indices: Vec<usize>,
}

impl<T> ActiveSets<T> {
    pub fn is_empty(&self) -> bool {
        self.active_classes.is_empty()
    }
}

/// One sample per image; argmax ties go to the lowest class id.
pub fn assign_pseudo_labels<T: Scalar>(
    model: &ClassifierModel<T>,
    images: &ImageBatch<T>,
) -> Result<Vec<PseudoLabeledSample<T>>> {
    let probs = model.forward(images)?;
    Ok(images
        .iter()
        .zip(probs.iter_rows())
        .enumerate()
        .map(|(position, (img, row))| {
            let label = argmax(row);
            PseudoLabeledSample { image: img.to_vec(), pseudo_label: label, confidence: row[label], position }
        })
        .collect())
}

pub fn majority_vote<T>(samples: &[PseudoLabeledSample<T>], classes: usize, threshold_fraction: f64) -> Vote {
    let mut counts = vec![0usize; classes];
    for s in samples {
        if s.pseudo_label < classes {
            counts[s.pseudo_label] += 1;
        }
    }
    let threshold = threshold_fraction * samples.len() as f64;
    let active = (0..classes).filter(|&c| counts[c] as f64 > threshold).collect();
    Vote { counts, active, window: samples.len() }
}

pub fn filter_active<T: Scalar>(
    samples: &[PseudoLabeledSample<T>],
    active_classes: &[usize],
    buffer: &CondensedBuffer<T>,
) -> Result<ActiveSets<T>> {
    let active_stream = samples.iter().filter(|s| active_classes.contains(&s.pseudo_label)).cloned().collect();
    let active_synthetic_indices = buffer.slots_for_classes(active_classes)?;
    Ok(ActiveSets { active_classes: active_classes.to_vec(), active_stream, active_synthetic_indices })
}

/// Fraction of samples whose pseudo-label equals the ground truth at their
/// position. `None` for an empty sample list.
pub fn pseudo_label_accuracy<T>(samples: &[PseudoLabeledSample<T>], hidden_labels: &[usize]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let hits = samples.iter().filter(|s| hidden_labels.get(s.position) == Some(&s.pseudo_label)).count();
    Some(hits as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::buffer::CondensedBuffer;
    use crate::data::Normalization;
    use crate::model::Architecture;
    use crate::tensor::Shape;

    fn labelled(labels: &[usize]) -> Vec<PseudoLabeledSample<f64>> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &l)| PseudoLabeledSample { image: vec![i as f64], pseudo_label: l, confidence: 0.9, position: i })
            .collect()
    }

    fn window() -> Vec<PseudoLabeledSample<f64>> {
        labelled(&[3, 3, 1, 3, 3, 5, 3, 1, 3, 3])
    }

    fn buffer() -> CondensedBuffer<f64> {
        CondensedBuffer::zeros(6, 2, Shape::flat(1), Normalization::identity(1)).unwrap()
    }

    #[test]
    fn strict_threshold_on_window_fraction() {
        let v = majority_vote(&window(), 6, 0.4);
        assert_eq!(v.active, vec![3]);
        assert_eq!(v.counts[1], 2);
        assert_eq!(majority_vote(&window(), 6, 0.0).active, vec![1, 3, 5]);
        assert!(majority_vote(&window(), 6, 1.0).active.is_empty());
        // 7 > 0.7 * 10 is false
        assert!(majority_vote(&window(), 6, 0.7).active.is_empty());
    }

    #[test]
    fn filter_keeps_active_samples_and_slots() {
        let w = window();
        let b = buffer();
        let sets = filter_active(&w, &[3], &b).unwrap();
        assert_eq!(sets.active_stream.len(), 7);
        assert!(sets.active_stream.iter().all(|s| s.pseudo_label == 3));
        assert_eq!(sets.active_synthetic_indices, vec![6, 7]);

        let none = filter_active(&w, &[], &b).unwrap();
        assert!(none.active_stream.is_empty() && none.active_synthetic_indices.is_empty());

        let all: Vec<usize> = (0..6).collect();
        let every = filter_active(&w, &all, &b).unwrap();
        assert_eq!(every.active_stream.len(), 10);
        assert_eq!(every.active_synthetic_indices, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn uniform_model_labels_everything_class_zero() {
        let m = ClassifierModel::<f64>::zeros(Architecture::linear(Shape::flat(2), 4)).unwrap();
        let x = ImageBatch::new(Shape::flat(2), vec![0.3, 0.1, -5.0, 2.0]).unwrap();
        let s = assign_pseudo_labels(&m, &x).unwrap();
        assert!(s.iter().all(|p| p.pseudo_label == 0 && (p.confidence - 0.25).abs() < 1e-15));
    }

    #[test]
    fn pseudo_accuracy_uses_positions() {
        let s = labelled(&[0, 1, 1]);
        assert_eq!(pseudo_label_accuracy(&s[1..], &[0, 1, 0]), Some(0.5));
        assert_eq!(pseudo_label_accuracy::<f64>(&[], &[]), None);
    }
}
