//! Grid sweeps. Each (cell, seed) runs as a `deco run` subprocess.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;

use deco_core::ExperimentConfig;

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub base_config: Option<PathBuf>,
    /// Config key and the values it takes, in sweep order.
    pub axes: Vec<(String, Vec<String>)>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

/// One subprocess worth of work.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepJob {
    pub overrides: Vec<(String, String)>,
    pub seed: u64,
    pub dir: PathBuf,
}

/// Parses `key=v1,v2,...`.
pub fn parse_axis(text: &str) -> Result<(String, Vec<String>)> {
    let (key, values) =
        text.split_once('=').ok_or_else(|| HarnessError::usage(format!("axis {text:?} is not `key=v1,v2`")))?;
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(HarnessError::usage(format!("axis {key:?} has no values")));
    }
    Ok((key.trim().to_string(), values))
}

fn cell_name(overrides: &[(String, String)]) -> String {
    if overrides.is_empty() {
        return "base".into();
    }
    overrides.iter().map(|(k, v)| format!("{k}={}", v.replace(['/', '\\'], "_"))).collect::<Vec<_>>().join("__")
}

impl SweepSpec {
    /// Checks every axis key and value against the config parser.
    pub fn validate(&self, base: &ExperimentConfig) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(HarnessError::usage("sweep needs at least one seed"));
        }
        for (key, values) in &self.axes {
            if key == "seed" {
                return Err(HarnessError::usage("sweep seeds with --seeds, not an axis"));
            }
            if !ExperimentConfig::KEYS.contains(&key.as_str()) {
                return Err(HarnessError::usage(format!("axis {key:?} is not a config key")));
            }
            for v in values {
                let mut cfg = base.clone();
                cfg.set(key, v)?;
                cfg.validate()?;
            }
        }
        Ok(())
    }

    /// Cartesian product of the axes, each crossed with every seed.
    pub fn jobs(&self) -> Vec<SweepJob> {
        let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
        for (key, values) in &self.axes {
            cells = cells
                .into_iter()
                .flat_map(|cell| {
                    values.iter().map(move |v| {
                        let mut c = cell.clone();
                        c.push((key.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        cells
            .into_iter()
            .flat_map(|overrides| {
                let cell_dir = self.out.join(cell_name(&overrides));
                self.seeds.iter().map(move |&seed| SweepJob {
                    overrides: overrides.clone(),
                    seed,
                    dir: cell_dir.join(format!("seed={seed}")),
                })
            })
            .collect()
    }
}

/// Runs every job through `exe run ...` with at most `jobs` concurrent
/// subprocesses. Returns the failed jobs with their exit status.
pub fn run_jobs(exe: &Path, spec: &SweepSpec, extra_args: &[String], jobs: usize) -> Vec<(SweepJob, String)> {
    let queue = Mutex::new(spec.jobs().into_iter());
    let failures = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1) {
            s.spawn(|| loop {
                let Some(job) = queue.lock().expect("queue lock").next() else { break };
                let mut cmd = Command::new(exe);
                cmd.arg("run").arg("--seed").arg(job.seed.to_string()).arg("--out").arg(&job.dir);
                if let Some(base) = &spec.base_config {
                    cmd.arg("--config").arg(base);
                }
                for (k, v) in &job.overrides {
                    cmd.arg("--set").arg(format!("{k}={v}"));
                }
                cmd.args(extra_args);
                log::info!("running {}", job.dir.display());
                let outcome = match cmd.status() {
                    Ok(st) if st.success() => None,
                    Ok(st) => Some(st.to_string()),
                    Err(e) => Some(e.to_string()),
                };
                if let Some(reason) = outcome {
                    failures.lock().expect("failure lock").push((job, reason));
                }
            });
        }
    });
    let mut failed = failures.into_inner().expect("failure lock");
    failed.sort_by(|a, b| a.0.dir.cmp(&b.0.dir));
    failed
}
