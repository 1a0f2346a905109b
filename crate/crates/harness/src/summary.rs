//! Aggregation of run directories into a method × IpC × labeled-ratio table.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use deco_core::Method;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::output::RunRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub ipc: usize,
    pub labeled_ratio: f64,
    pub n: usize,
    pub mean_accuracy: f64,
    /// Sample standard deviation; 0 when `n = 1`.
    pub std_accuracy: f64,
    pub single_run: bool,
    /// `(method − best baseline) / best baseline`, for non-baseline methods.
    pub improvement: Option<f64>,
    /// `run_dir#seed` entries separated by `;`.
    pub provenance: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    /// Grid cells with no completed run, as `method ipc=.. labeled_ratio=..`.
    pub missing: Vec<String>,
}

pub const SUMMARY_HEADER: &[&str] = &[
    "method",
    "ipc",
    "labeled_ratio",
    "n",
    "mean_accuracy",
    "std_accuracy",
    "single_run",
    "improvement",
    "provenance",
];

fn is_baseline(method: &str) -> bool {
    matches!(method.parse::<Method>(), Ok(Method::Baseline(_)))
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Summarises final accuracies. Provenance paths are relative to `root`
/// when possible.
pub fn summarize(runs: &[RunRecord], root: &Path) -> Summary {
    type Cell = (String, usize, u64);
    let mut groups: BTreeMap<Cell, Vec<&RunRecord>> = BTreeMap::new();
    for r in runs {
        let m = &r.manifest;
        groups.entry((m.method.clone(), m.ipc, m.labeled_ratio.to_bits())).or_default().push(r);
    }

    let mut best_baseline: BTreeMap<(usize, u64), f64> = BTreeMap::new();
    let mut rows = Vec::new();
    for ((method, ipc, ratio), members) in &groups {
        let accs: Vec<f64> = members.iter().map(|r| r.manifest.final_accuracy).collect();
        let (mean, std) = mean_std(&accs);
        if is_baseline(method) {
            let best = best_baseline.entry((*ipc, *ratio)).or_insert(f64::NEG_INFINITY);
            *best = best.max(mean);
        }
        let provenance = members
            .iter()
            .map(|r| {
                let dir = r.dir.strip_prefix(root).unwrap_or(&r.dir);
                format!("{}#{}", dir.display(), r.manifest.seed)
            })
            .collect::<Vec<_>>()
            .join(";");
        rows.push(SummaryRow {
            method: method.clone(),
            ipc: *ipc,
            labeled_ratio: f64::from_bits(*ratio),
            n: accs.len(),
            mean_accuracy: mean,
            std_accuracy: std,
            single_run: accs.len() == 1,
            improvement: None,
            provenance,
        });
    }
    for row in rows.iter_mut().filter(|r| !is_baseline(&r.method)) {
        row.improvement =
            best_baseline.get(&(row.ipc, row.labeled_ratio.to_bits())).map(|&best| (row.mean_accuracy - best) / best);
    }

    let methods: BTreeSet<&String> = groups.keys().map(|k| &k.0).collect();
    let cells: BTreeSet<(usize, u64)> = groups.keys().map(|k| (k.1, k.2)).collect();
    let mut missing = Vec::new();
    for &(ipc, ratio) in &cells {
        for &m in &methods {
            if !groups.contains_key(&(m.clone(), ipc, ratio)) {
                missing.push(format!("{m} ipc={ipc} labeled_ratio={}", f64::from_bits(ratio)));
            }
        }
        if !methods.iter().any(|m| is_baseline(m) && groups.contains_key(&((*m).clone(), ipc, ratio))) {
            missing
                .push(format!("baseline ipc={ipc} labeled_ratio={} (no improvement reference)", f64::from_bits(ratio)));
        }
    }
    Summary { rows, missing }
}

pub fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    crate::output::write_csv(path, SUMMARY_HEADER, &summary.rows)
}
