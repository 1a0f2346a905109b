//! Learning-curve images: one per method, one line per (IpC, labeled
//! ratio) cell, averaged over seeds.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use plotters::coord::Shift;
use plotters::prelude::*;

use crate::error::{HarnessError, Result};
use crate::output::RunRecord;

/// Environment variable naming a TTF file for plot text.
pub const FONT_ENV: &str = "DECO_FONT";

const FONT_DIRS: &[&str] = &["/usr/share/fonts", "/usr/local/share/fonts", "/Library/Fonts", "C:\\Windows\\Fonts"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ImageFormat {
    Svg,
    Png,
}

impl ImageFormat {
    fn extension(self) -> &'static str {
        match self {
            Self::Svg => "svg",
            Self::Png => "png",
        }
    }
}

fn find_font() -> Option<PathBuf> {
    if let Some(p) = std::env::var_os(FONT_ENV) {
        return Some(PathBuf::from(p));
    }
    let candidates: Vec<PathBuf> = FONT_DIRS
        .iter()
        .flat_map(|d| walkdir::WalkDir::new(d).sort_by_file_name().into_iter().filter_map(|e| e.ok()))
        .map(|e| e.into_path())
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ttf")))
        .collect();
    let sans = |p: &&PathBuf| {
        let name = p.file_stem().map(|s| s.to_string_lossy().to_lowercase()).unwrap_or_default();
        name.contains("sans") && !name.contains("mono") && !name.contains("bold") && !name.contains("oblique")
    };
    candidates.iter().find(sans).or(candidates.first()).cloned()
}

/// Registers a font once per process. Returns false when none is usable,
/// in which case plots are drawn without text.
fn font_ready() -> bool {
    static READY: OnceLock<bool> = OnceLock::new();
    *READY.get_or_init(|| {
        let Some(path) = find_font() else {
            log::warn!("no TTF font found (set {FONT_ENV}); plots will have no text");
            return false;
        };
        let Ok(bytes) = std::fs::read(&path) else {
            log::warn!("cannot read font {}", path.display());
            return false;
        };
        let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
        plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok()
    })
}

/// Seed-mean accuracy per checkpoint, over the checkpoints all seeds share.
pub fn mean_curve(runs: &[&RunRecord]) -> Vec<(f64, f64)> {
    let len = runs.iter().map(|r| r.checkpoints.len()).min().unwrap_or(0);
    (0..len)
        .map(|i| {
            let x = runs[0].checkpoints[i].inputs_processed as f64;
            let y = runs.iter().map(|r| r.checkpoints[i].test_accuracy).sum::<f64>() / runs.len() as f64;
            (x, y)
        })
        .collect()
}

fn plot_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Invariant(format!("plot: {e}"))
}

fn draw<DB: DrawingBackend>(
    root: DrawingArea<DB, Shift>,
    method: &str,
    curves: &[(String, Vec<(f64, f64)>)],
) -> Result<()>
where
    DB::ErrorType: 'static,
{
    let text = font_ready();
    root.fill(&WHITE).map_err(plot_err)?;
    let x_max = curves.iter().flat_map(|(_, c)| c.iter().map(|p| p.0)).fold(1.0, f64::max);
    let mut builder = ChartBuilder::on(&root);
    builder.margin(15);
    if text {
        builder.caption(method, ("sans-serif", 22)).x_label_area_size(40).y_label_area_size(50);
    }
    let mut chart = builder.build_cartesian_2d(0.0..x_max, 0.0..1.0).map_err(plot_err)?;
    let mut mesh = chart.configure_mesh();
    if text {
        mesh.x_desc("stream samples").y_desc("test accuracy");
    } else {
        mesh.disable_x_axis().disable_y_axis();
    }
    mesh.draw().map_err(plot_err)?;
    for (i, (label, curve)) in curves.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let series =
            chart.draw_series(LineSeries::new(curve.iter().copied(), color.stroke_width(2))).map_err(plot_err)?;
        if text {
            series.label(label).legend(move |(x, y)| PathElement::new([(x, y), (x + 20, y)], color.stroke_width(2)));
        }
    }
    if text && !curves.is_empty() {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Writes `curve_<method>.<ext>` per method into `out` and returns the paths.
pub fn plot_learning_curves(runs: &[RunRecord], out: &Path, format: ImageFormat) -> Result<Vec<PathBuf>> {
    let mut by_method: BTreeMap<&str, BTreeMap<(usize, u64), Vec<&RunRecord>>> = BTreeMap::new();
    for r in runs {
        let m = &r.manifest;
        by_method.entry(&m.method).or_default().entry((m.ipc, m.labeled_ratio.to_bits())).or_default().push(r);
    }
    let mut written = Vec::new();
    for (method, cells) in by_method {
        let curves: Vec<(String, Vec<(f64, f64)>)> = cells
            .iter()
            .map(|(&(ipc, ratio), members)| {
                (format!("IpC {ipc}, labeled {} (n={})", f64::from_bits(ratio), members.len()), mean_curve(members))
            })
            .collect();
        let path = out.join(format!("curve_{method}.{}", format.extension()));
        let size = (800, 500);
        match format {
            ImageFormat::Svg => draw(SVGBackend::new(&path, size).into_drawing_area(), method, &curves)?,
            ImageFormat::Png => draw(BitMapBackend::new(&path, size).into_drawing_area(), method, &curves)?,
        }
        written.push(path);
    }
    Ok(written)
}
