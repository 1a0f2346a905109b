//! Run directories: the CSV files and manifest written by `deco run`.
//!
//! | file | one row per |
//! |---|---|
//! | `metrics.csv` | accuracy checkpoint |
//! | `votes.csv` | stream segment |
//! | `condense.csv` | matching step |
//! | `run.json` | run (manifest) |

use std::fs;
use std::path::{Path, PathBuf};

use deco_core::orchestrator::{variant_label, CheckpointKind, PhaseTimes, RunMetrics};
use deco_core::ExperimentConfig;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Bumped whenever a column or manifest field changes meaning.
pub const SCHEMA_VERSION: u32 = 1;

pub const METRICS_CSV: &str = "metrics.csv";
pub const VOTES_CSV: &str = "votes.csv";
pub const CONDENSE_CSV: &str = "condense.csv";
pub const MANIFEST: &str = "run.json";
pub const CONFIG_FILE: &str = "config.cfg";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub checkpoint: usize,
    pub kind: String,
    pub inputs_processed: usize,
    pub segments: usize,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteRow {
    pub segment: usize,
    pub window: usize,
    pub short: bool,
    /// Space-separated class ids.
    pub active_classes: String,
    pub retained: usize,
    pub pseudo_accuracy_all: Option<f64>,
    pub pseudo_accuracy_retained: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CondenseRow {
    pub segment: usize,
    pub iteration: usize,
    pub variant: String,
    #[serde(rename = "D")]
    pub distance: f64,
    #[serde(rename = "L_cont")]
    pub contrastive: f64,
    pub epsilon: Option<f64>,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhasesMs {
    pub pretrain: f64,
    pub init: f64,
    pub label: f64,
    pub update: f64,
    pub retrain: f64,
    pub eval: f64,
}

impl From<&PhaseTimes> for PhasesMs {
    fn from(p: &PhaseTimes) -> Self {
        Self {
            pretrain: p.pretrain_ms,
            init: p.init_ms,
            label: p.label_ms,
            update: p.update_ms,
            retrain: p.retrain_ms,
            eval: p.eval_ms,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    /// Policy name, or the condensation variant for DECO runs.
    pub method: String,
    pub seed: u64,
    pub ipc: usize,
    pub labeled_ratio: f64,
    pub dataset: String,
    pub precision: String,
    pub final_accuracy: f64,
    pub mean_checkpoint_accuracy: f64,
    pub retrain_events: usize,
    pub final_class_counts: Vec<usize>,
    pub phases_ms: PhasesMs,
    /// Full config in `key = value` form.
    pub config: String,
}

impl RunManifest {
    pub fn new(cfg: &ExperimentConfig, metrics: &RunMetrics, precision: &str) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            method: variant_label(cfg),
            seed: cfg.seed,
            ipc: cfg.ipc,
            labeled_ratio: cfg.labeled_ratio,
            dataset: cfg.get("dataset").unwrap_or_default(),
            precision: precision.to_string(),
            final_accuracy: metrics.final_accuracy(),
            mean_checkpoint_accuracy: metrics.mean_checkpoint_accuracy(),
            retrain_events: metrics.retrain_events(),
            final_class_counts: metrics.final_class_counts.clone(),
            phases_ms: (&metrics.phases).into(),
            config: cfg.to_text(),
        }
    }
}

pub fn metrics_rows(m: &RunMetrics) -> Vec<MetricsRow> {
    m.checkpoints
        .iter()
        .enumerate()
        .map(|(i, c)| MetricsRow {
            checkpoint: i,
            kind: match c.kind {
                CheckpointKind::Pretrain => "pretrain",
                CheckpointKind::Retrain => "retrain",
            }
            .into(),
            inputs_processed: c.inputs_processed,
            segments: c.segments,
            test_accuracy: c.test_accuracy,
        })
        .collect()
}

pub fn vote_rows(m: &RunMetrics) -> Vec<VoteRow> {
    m.votes
        .iter()
        .map(|v| VoteRow {
            segment: v.segment,
            window: v.window,
            short: v.short,
            active_classes: v.active_classes.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
            retained: v.retained,
            pseudo_accuracy_all: v.pseudo_accuracy_all,
            pseudo_accuracy_retained: v.pseudo_accuracy_retained,
        })
        .collect()
}

pub fn condense_rows(m: &RunMetrics) -> Vec<CondenseRow> {
    m.condense
        .iter()
        .map(|c| CondenseRow {
            segment: c.segment,
            iteration: c.iteration,
            variant: c.variant.to_string(),
            distance: c.distance,
            contrastive: c.contrastive,
            epsilon: c.epsilon,
            grad_norm: c.grad_norm,
            wall_ms: c.wall_ms,
        })
        .collect()
}

/// Writes rows with a header line, even when `rows` is empty.
pub fn write_csv<R: Serialize>(path: &Path, header: &[&str], rows: &[R]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub const METRICS_HEADER: &[&str] = &["checkpoint", "kind", "inputs_processed", "segments", "test_accuracy"];
pub const VOTES_HEADER: &[&str] =
    &["segment", "window", "short", "active_classes", "retained", "pseudo_accuracy_all", "pseudo_accuracy_retained"];
pub const CONDENSE_HEADER: &[&str] =
    &["segment", "iteration", "variant", "D", "L_cont", "epsilon", "grad_norm", "wall_ms"];

/// Creates `dir` for fresh output. An existing non-empty directory is a
/// usage error unless `force` is set.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() && !force {
        return Err(HarnessError::usage(format!("{} is not empty; pass --force to overwrite", dir.display())));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Same rule for a single output file.
pub fn check_output_file(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(HarnessError::usage(format!("{} exists; pass --force to overwrite", path.display())));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

pub fn write_run(dir: &Path, cfg: &ExperimentConfig, metrics: &RunMetrics, precision: &str) -> Result<()> {
    fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
    write_csv(&dir.join(METRICS_CSV), METRICS_HEADER, &metrics_rows(metrics))?;
    write_csv(&dir.join(VOTES_CSV), VOTES_HEADER, &vote_rows(metrics))?;
    write_csv(&dir.join(CONDENSE_CSV), CONDENSE_HEADER, &condense_rows(metrics))?;
    let manifest = RunManifest::new(cfg, metrics, precision);
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

/// A completed run directory.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub checkpoints: Vec<MetricsRow>,
}

pub fn read_run(dir: &Path) -> Result<RunRecord> {
    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(HarnessError::usage(format!(
            "{}: schema version {} (expected {SCHEMA_VERSION})",
            dir.display(),
            manifest.schema_version
        )));
    }
    let checkpoints = read_csv(&dir.join(METRICS_CSV))?;
    Ok(RunRecord { dir: dir.to_path_buf(), manifest, checkpoints })
}

/// Every run directory under `root` (including `root`), sorted by path.
pub fn find_runs(root: &Path) -> Result<Vec<RunRecord>> {
    let mut dirs: Vec<PathBuf> = walkdir::WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name() == MANIFEST)
        .filter_map(|e| e.path().parent().map(Path::to_path_buf))
        .collect();
    dirs.sort();
    dirs.iter().map(|d| read_run(d)).collect()
}
