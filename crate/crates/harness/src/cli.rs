use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use deco_core::buffer::{export_png_grid, save_buffer};
use deco_core::model::save_model;
use deco_core::orchestrator::{evaluate, prepare_data, pretrain, run_experiment, Memory, DATA_ROOT_ENV};
use deco_core::{ExperimentConfig, Scalar, Storable};

use crate::error::{HarnessError, Result};
use crate::output::{check_output_file, find_runs, prepare_output_dir, write_run};
use crate::plot::{plot_learning_curves, ImageFormat};
use crate::summary::{summarize, write_summary};
use crate::sweep::{parse_axis, run_jobs, SweepSpec};

pub const SUMMARY_CSV: &str = "summary.csv";

#[derive(Debug, Parser)]
#[command(name = "deco", version, about = "Continual learning with a condensed replay buffer")]
#[command(after_help = format!("Dataset root for CIFAR-10: `data_root` config key or ${DATA_ROOT_ENV}."))]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write its run directory.
    Run(RunArgs),
    /// Run a grid of experiments as parallel subprocesses.
    Sweep(SweepArgs),
    /// Pretrain on the labeled split and save the model checkpoint.
    Pretrain(PretrainArgs),
    /// Check core numerics against brute-force oracles.
    OracleTests(OracleArgs),
    /// Learning curves and a summary table from run directories.
    Plot(PlotArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    fn name(self) -> &'static str {
        match self {
            Self::F64 => "f64",
            Self::F32 => "f32",
        }
    }
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// `key = value` config file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set ipc=5`. Applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run seed; overrides the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| HarnessError::usage(format!("cannot read {}: {e}", path.display())))?;
                ExperimentConfig::parse(&text)?
            }
            None => ExperimentConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) =
                o.split_once('=').ok_or_else(|| HarnessError::usage(format!("--set {o:?} is not KEY=VALUE")))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: Precision,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Swept key and values, e.g. `--axis ipc=1,5`. Repeatable.
    #[arg(long = "axis", value_name = "KEY=V1,V2")]
    pub axes: Vec<String>,
    /// Seeds per cell; runs use seeds 0..N.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Concurrent subprocesses.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub force: bool,
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: Precision,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Checkpoint file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Random instances per check.
    #[arg(long, default_value_t = 20)]
    pub draws: usize,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Directory searched recursively for run directories.
    pub runs: PathBuf,
    /// Output directory; defaults to `<runs>/plots`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "svg")]
    pub format: ImageFormat,
    #[arg(long)]
    pub force: bool,
}

fn run_typed<T: Storable + Scalar>(cfg: &ExperimentConfig, out: &Path, precision: Precision) -> Result<()> {
    let result = run_experiment::<T>(cfg)?;
    write_run(out, cfg, &result.metrics, precision.name())?;
    save_model(&result.model, out.join("model.ckpt"))?;
    if let Memory::Condensed(buf) = &result.memory {
        save_buffer(buf, out.join("buffer.deco"))?;
        if buf.shape().height > 1 {
            export_png_grid(buf, out.join("buffer.png"))?;
        }
    }
    println!(
        "final accuracy {:.4} ({} retrain events)",
        result.metrics.final_accuracy(),
        result.metrics.retrain_events()
    );
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = args.config.load()?;
    prepare_output_dir(&args.out, args.force)?;
    match args.precision {
        Precision::F64 => run_typed::<f64>(&cfg, &args.out, args.precision),
        Precision::F32 => run_typed::<f32>(&cfg, &args.out, args.precision),
    }
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let base = ConfigArgs { config: args.config.clone(), overrides: Vec::new(), seed: None }.load()?;
    let spec = SweepSpec {
        base_config: args.config.clone(),
        axes: args.axes.iter().map(|a| parse_axis(a)).collect::<Result<_>>()?,
        seeds: (0..args.seeds).collect(),
        out: args.out.clone(),
    };
    spec.validate(&base)?;
    prepare_output_dir(&spec.out, args.force)?;
    let mut extra = vec!["--precision".to_string(), args.precision.name().to_string()];
    if args.force {
        extra.push("--force".into());
    }
    let exe = std::env::current_exe()?;
    let failed = run_jobs(&exe, &spec, &extra, args.jobs);
    let runs = find_runs(&spec.out)?;
    let summary = summarize(&runs, &spec.out);
    write_summary(&spec.out.join(SUMMARY_CSV), &summary)?;
    for m in &summary.missing {
        eprintln!("missing cell: {m}");
    }
    if failed.is_empty() {
        println!("{} runs written under {}", runs.len(), spec.out.display());
        Ok(())
    } else {
        let list: Vec<String> = failed.iter().map(|(j, why)| format!("{} ({why})", j.dir.display())).collect();
        Err(HarnessError::Invariant(format!("{} sweep runs failed: {}", failed.len(), list.join(", "))))
    }
}

fn cmd_pretrain(args: &PretrainArgs) -> Result<()> {
    let cfg = args.config.load()?;
    check_output_file(&args.out, args.force)?;
    let data = prepare_data::<f64>(&cfg)?;
    let model = pretrain(&cfg, &data.labeled)?;
    save_model(&model, &args.out)?;
    println!("test accuracy {:.4}", evaluate(&model, &data.test)?);
    Ok(())
}

fn cmd_oracle(args: &OracleArgs) -> Result<()> {
    let results = crate::oracle_suite::run_suite(args.draws.max(1));
    for r in &results {
        println!(
            "{:<4} {:<26} draws {:>3}  worst {:.3e}",
            if r.pass { "PASS" } else { "FAIL" },
            r.name,
            r.draws,
            r.worst
        );
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.pass).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(HarnessError::Invariant(format!("oracle checks failed: {}", failed.join(", "))))
    }
}

fn cmd_plot(args: &PlotArgs) -> Result<()> {
    let runs = find_runs(&args.runs)?;
    if runs.is_empty() {
        return Err(HarnessError::usage(format!("no run directories under {}", args.runs.display())));
    }
    let out = args.out.clone().unwrap_or_else(|| args.runs.join("plots"));
    prepare_output_dir(&out, args.force)?;
    let images = plot_learning_curves(&runs, &out, args.format)?;
    let summary = summarize(&runs, &args.runs);
    write_summary(&out.join(SUMMARY_CSV), &summary)?;
    for m in &summary.missing {
        eprintln!("missing cell: {m}");
    }
    println!("{} images and {SUMMARY_CSV} written to {}", images.len(), out.display());
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::OracleTests(a) => cmd_oracle(a),
        Command::Plot(a) => cmd_plot(a),
    }
}
