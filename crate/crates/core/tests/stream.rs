use deco_core::data::synthetic_blob_dataset;
use deco_core::stream::{build_stream, run_lengths, stream_order};
use deco_core::{Shape, StreamSpec};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn stc_500_runs_are_exactly_500_long() {
    let data = synthetic_blob_dataset::<f64>(10, 1500, Shape::flat(2), 4.0, 3).unwrap();
    let spec = StreamSpec::new(500, 100, 12_250, 9);
    let stream = build_stream(&spec, &data).unwrap();
    let runs = run_lengths(&stream.hidden_labels_for_evaluation());
    let (last, body) = runs.split_last().unwrap();
    assert!(body.iter().all(|&r| r == 500), "{runs:?}");
    assert_eq!(*last, 250);
}

#[test]
fn class_frequencies_are_uniform_over_long_stream() {
    let classes = 10;
    let data = synthetic_blob_dataset::<f64>(classes, 50, Shape::flat(1), 1.0, 0).unwrap();
    let spec = StreamSpec { with_replacement: true, ..StreamSpec::new(1, 1000, 1_000_000, 21) };
    let order = stream_order(&spec, &data).unwrap();
    assert_eq!(order.len(), 1_000_000);
    let mut counts = vec![0f64; classes];
    for i in order {
        counts[data.labels[i]] += 1.0;
    }
    let expected = 1_000_000.0 / classes as f64;
    let stat: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((classes - 1) as f64).unwrap().cdf(stat);
    assert!(p > 0.01, "chi2 {stat}, p {p}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stream_structure_holds(
        classes in 2usize..6,
        stc in 1usize..40,
        segment in 1usize..60,
        runs in 1usize..12,
        seed in any::<u64>(),
    ) {
        let data = synthetic_blob_dataset::<f64>(classes, 40 * runs, Shape::flat(2), 3.0, seed).unwrap();
        let total = stc * runs - stc / 2;
        let stream = build_stream(&StreamSpec::new(stc, segment, total, seed), &data).unwrap();
        prop_assert_eq!(stream.len(), total);
        let labels = stream.hidden_labels_for_evaluation();
        let lens = run_lengths(&labels);
        let (last, body) = lens.split_last().unwrap();
        prop_assert!(body.iter().all(|&r| r == stc));
        prop_assert!(*last <= stc);
        for (k, seg) in stream.segments.iter().enumerate() {
            prop_assert_eq!(seg.index(), k);
            prop_assert_eq!(seg.is_short(), seg.len() < segment);
            if k + 1 < stream.segments.len() {
                prop_assert_eq!(seg.len(), segment);
            }
        }
        let mut seen: Vec<usize> = stream.segments.iter().flat_map(|s| s.source_indices().to_vec()).collect();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), total);
    }
}
