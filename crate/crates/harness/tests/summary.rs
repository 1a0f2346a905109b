use std::path::Path;

use deco_core::ExperimentConfig;
use deco_harness::output::{
    find_runs, write_csv, MetricsRow, PhasesMs, RunManifest, MANIFEST, METRICS_CSV, METRICS_HEADER, SCHEMA_VERSION,
};
use deco_harness::summary::{summarize, Summary};
use deco_harness::sweep::{parse_axis, SweepSpec};

fn fake_run(root: &Path, name: &str, method: &str, ipc: usize, seed: u64, accuracy: f64) {
    let dir = root.join(name);
    std::fs::create_dir_all(&dir).unwrap();
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        method: method.into(),
        seed,
        ipc,
        labeled_ratio: 0.1,
        dataset: "blobs".into(),
        precision: "f64".into(),
        final_accuracy: accuracy,
        mean_checkpoint_accuracy: accuracy,
        retrain_events: 1,
        final_class_counts: vec![ipc; 2],
        phases_ms: PhasesMs::default(),
        config: String::new(),
    };
    std::fs::write(dir.join(MANIFEST), serde_json::to_string(&manifest).unwrap()).unwrap();
    let rows = [
        MetricsRow { checkpoint: 0, kind: "pretrain".into(), inputs_processed: 0, segments: 0, test_accuracy: 0.5 },
        MetricsRow {
            checkpoint: 1,
            kind: "retrain".into(),
            inputs_processed: 100,
            segments: 1,
            test_accuracy: accuracy,
        },
    ];
    write_csv(&dir.join(METRICS_CSV), METRICS_HEADER, &rows).unwrap();
}

fn summary_of(root: &Path) -> Summary {
    summarize(&find_runs(root).unwrap(), root)
}

#[test]
fn hand_built_runs_give_exact_means_and_stds() {
    let tmp = tempfile::tempdir().unwrap();
    for (i, acc) in [0.50, 0.60, 0.70].into_iter().enumerate() {
        fake_run(tmp.path(), &format!("deco{i}"), "deco", 1, i as u64, acc);
    }
    for (i, acc) in [0.40, 0.44].into_iter().enumerate() {
        fake_run(tmp.path(), &format!("fifo{i}"), "fifo", 1, i as u64, acc);
    }
    fake_run(tmp.path(), "random0", "random", 1, 0, 0.48);
    let s = summary_of(tmp.path());
    assert_eq!(s.rows.len(), 3);

    let deco = s.rows.iter().find(|r| r.method == "deco").unwrap();
    assert_eq!(deco.n, 3);
    assert!((deco.mean_accuracy - 0.6).abs() < 1e-12);
    // deviations -0.1, 0, 0.1 → variance 0.02 / 2
    assert!((deco.std_accuracy - 0.1).abs() < 1e-12);
    assert!((deco.improvement.unwrap() - (0.6 - 0.48) / 0.48).abs() < 1e-12);
    assert_eq!(deco.provenance, "deco0#0;deco1#1;deco2#2");

    let fifo = s.rows.iter().find(|r| r.method == "fifo").unwrap();
    assert!((fifo.mean_accuracy - 0.42).abs() < 1e-12);
    assert!((fifo.std_accuracy - 0.02 * 2f64.sqrt()).abs() < 1e-12);
    assert_eq!(fifo.improvement, None);
    assert!(s.missing.is_empty());
}

#[test]
fn single_cell_is_flagged_with_zero_std() {
    let tmp = tempfile::tempdir().unwrap();
    fake_run(tmp.path(), "only", "deco", 5, 3, 0.71);
    let s = summary_of(tmp.path());
    assert_eq!(s.rows.len(), 1);
    let row = &s.rows[0];
    assert!(row.single_run && row.n == 1);
    assert_eq!((row.mean_accuracy, row.std_accuracy), (0.71, 0.0));
    assert_eq!(row.improvement, None);
    assert_eq!(s.missing.len(), 1, "{:?}", s.missing);
}

#[test]
fn improvement_is_zero_when_deco_ties_best_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    fake_run(tmp.path(), "a", "deco", 1, 0, 0.55);
    fake_run(tmp.path(), "b", "gss", 1, 0, 0.55);
    fake_run(tmp.path(), "c", "fifo", 1, 0, 0.30);
    let s = summary_of(tmp.path());
    assert_eq!(s.rows.iter().find(|r| r.method == "deco").unwrap().improvement, Some(0.0));
}

#[test]
fn missing_cells_are_reported_not_filled() {
    let tmp = tempfile::tempdir().unwrap();
    fake_run(tmp.path(), "a", "deco", 1, 0, 0.6);
    fake_run(tmp.path(), "b", "fifo", 1, 0, 0.5);
    fake_run(tmp.path(), "c", "deco", 5, 0, 0.7);
    let s = summary_of(tmp.path());
    assert_eq!(s.rows.len(), 3);
    assert!(s.missing.iter().any(|m| m.starts_with("fifo ipc=5")), "{:?}", s.missing);
    let deco5 = s.rows.iter().find(|r| r.method == "deco" && r.ipc == 5).unwrap();
    assert_eq!(deco5.improvement, None);
}

#[test]
fn sweep_expands_cells_times_seeds() {
    let spec = SweepSpec {
        base_config: None,
        axes: vec![parse_axis("ipc=1,5").unwrap(), parse_axis("labeled_ratio=0.01, 0.1").unwrap()],
        seeds: vec![0, 1],
        out: "out".into(),
    };
    spec.validate(&ExperimentConfig::default()).unwrap();
    let jobs = spec.jobs();
    assert_eq!(jobs.len(), 8);
    let mut dirs: Vec<_> = jobs.iter().map(|j| j.dir.clone()).collect();
    dirs.sort();
    dirs.dedup();
    assert_eq!(dirs.len(), 8);
    assert_eq!(jobs[0].overrides, vec![("ipc".into(), "1".into()), ("labeled_ratio".into(), "0.01".into())]);

    let bad = |axis: &str| SweepSpec { axes: vec![parse_axis(axis).unwrap()], ..spec.clone() };
    assert!(bad("bogus=1").validate(&ExperimentConfig::default()).is_err());
    assert!(bad("ipc=0").validate(&ExperimentConfig::default()).is_err());
    assert!(bad("seed=1,2").validate(&ExperimentConfig::default()).is_err());
    assert!(parse_axis("ipc").is_err() && parse_axis("ipc=").is_err());
}
