//! PNG figures for the CSVs a run writes.
//!
//! Labels need a TrueType font: `SDFINV_FONT` or a common system path. Without
//! one the figures are drawn without text.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use anyhow::{bail, Context, Result};
use plotters::prelude::*;

use sdfinv_core::training::Stage;

const SIZE: (u32, u32) = (720, 420);
const FONT_PATHS: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

fn font_available() -> bool {
    static FONT: OnceLock<bool> = OnceLock::new();
    *FONT.get_or_init(|| {
        let candidates = std::env::var("SDFINV_FONT").into_iter().chain(FONT_PATHS.iter().map(|s| s.to_string()));
        for p in candidates {
            if let Ok(bytes) = std::fs::read(&p) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        false
    })
}

/// Header plus numeric rows of a comma-separated file.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = match lines.next() {
            Some(h) => h.split(',').map(str::to_string).collect(),
            None => bail!("{} has no header row", path.display()),
        };
        let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
        Ok(Self { header, rows })
    }

    fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    fn number(&self, row: usize, col: usize) -> f64 {
        self.rows[row].get(col).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN)
    }
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

/// One curve per non-`step` column against `step`.
pub fn line_figure(table: &Table, title: &str, out: &Path) -> Result<()> {
    let text = font_available();
    let step = table.column("step").context("curve table needs a step column")?;
    let series: Vec<(String, Vec<(f64, f64)>)> = table
        .header
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != step)
        .map(|(c, name)| {
            let pts = (0..table.rows.len())
                .map(|r| (table.number(r, step), table.number(r, c)))
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .collect();
            (name.clone(), pts)
        })
        .collect();
    let (x0, x1) = padded_range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let (y0, y1) = padded_range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let root = BitMapBackend::new(out, SIZE).into_drawing_area();
    root.fill(&WHITE)?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(12);
    if text {
        builder.caption(title, ("sans-serif", 20)).x_label_area_size(32).y_label_area_size(60);
    }
    let mut chart = builder.build_cartesian_2d(x0..x1, y0..y1)?;
    if text {
        chart.configure_mesh().x_desc("step").draw()?;
    } else {
        chart.configure_mesh().x_labels(0).y_labels(0).draw()?;
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let s = chart.draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))?;
        if text {
            s.label(name.as_str()).legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        }
    }
    if text && series.iter().any(|(_, p)| !p.is_empty()) {
        chart.configure_series_labels().background_style(WHITE.mix(0.85)).border_style(BLACK).draw()?;
    }
    root.present()?;
    Ok(())
}

/// Grouped bars: one group per category, one bar per series.
pub fn bar_figure(title: &str, categories: &[String], series: &[(String, Vec<f64>)], out: &Path) -> Result<()> {
    let root = BitMapBackend::new(out, SIZE).into_drawing_area();
    root.fill(&WHITE)?;
    bars_on(&root, title, categories, series)?;
    root.present()?;
    Ok(())
}

fn bars_on<DB: DrawingBackend>(
    area: &DrawingArea<DB, plotters::coord::Shift>,
    title: &str,
    categories: &[String],
    series: &[(String, Vec<f64>)],
) -> Result<()>
where
    DB::ErrorType: 'static,
{
    let text = font_available();
    let n_cat = categories.len().max(1);
    let n_ser = series.len().max(1);
    let (_, y1) = padded_range(series.iter().flat_map(|(_, v)| v.iter().copied()).chain([0.0]));
    // legend in its own strip so it never hides a bar
    let (plot_area, legend_area) = if text && !series.is_empty() {
        let w = area.dim_in_pixel().0 as i32;
        let (a, b) = area.split_horizontally(w - 120.min(w / 3));
        (a, Some(b))
    } else {
        (area.clone(), None)
    };
    let mut builder = ChartBuilder::on(&plot_area);
    builder.margin(10);
    if text {
        builder.caption(title, ("sans-serif", 16)).x_label_area_size(24).y_label_area_size(56);
    }
    let mut chart = builder.build_cartesian_2d(0.0..n_cat as f64, 0.0..y1)?;
    if text {
        let cats = categories.to_vec();
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(n_cat * 2 + 1)
            .x_label_formatter(&move |x| {
                let i = x.floor() as usize;
                if (x - i as f64 - 0.5).abs() < 0.26 { cats.get(i).cloned().unwrap_or_default() } else { String::new() }
            })
            .draw()
            .map_err(|e| anyhow::anyhow!("{e}"))?;
    } else {
        chart.configure_mesh().x_labels(0).y_labels(0).draw().map_err(|e| anyhow::anyhow!("{e}"))?;
    }
    let width = 0.8 / n_ser as f64;
    for (s, (name, values)) in series.iter().enumerate() {
        let color = Palette99::pick(s).to_rgba();
        let bars = values.iter().enumerate().filter(|(_, v)| v.is_finite()).map(move |(c, v)| {
            let x = c as f64 + 0.1 + s as f64 * width;
            Rectangle::new([(x, 0.0), (x + width * 0.9, *v)], color.filled())
        });
        chart.draw_series(bars).map_err(|e| anyhow::anyhow!("{e}"))?;
        if let Some(legend) = &legend_area {
            let y = 36 + 16 * s as i32;
            legend.draw(&Rectangle::new([(4, y - 5), (16, y + 5)], color.filled())).map_err(|e| anyhow::anyhow!("{e}"))?;
            legend.draw(&Text::new(name.clone(), (20, y - 6), ("sans-serif", 12))).map_err(|e| anyhow::anyhow!("{e}"))?;
        }
    }
    Ok(())
}

/// Summary tables of every evaluated model, merged into bars per metric.
fn metrics_2d(summaries: &[PathBuf], out_dir: &Path) -> Result<PathBuf> {
    let mut tables = Vec::new();
    for p in summaries {
        tables.push(Table::read(p)?);
    }
    let mut metrics: Vec<String> = Vec::new();
    let mut groups: Vec<String> = Vec::new();
    let mut cells: Vec<(String, String, f64)> = Vec::new();
    for t in &tables {
        let (m, v, k, mean) = match (t.column("model"), t.column("view"), t.column("metric"), t.column("mean")) {
            (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
            _ => bail!("summary CSV needs model, view, metric and mean columns"),
        };
        for r in 0..t.rows.len() {
            let group = format!("{}/{}", t.rows[r][m], t.rows[r][v]);
            let metric = t.rows[r][k].clone();
            if !groups.contains(&group) {
                groups.push(group.clone());
            }
            if !metrics.contains(&metric) {
                metrics.push(metric.clone());
            }
            cells.push((group, metric, t.number(r, mean)));
        }
    }
    let path = out_dir.join("metrics_2d.png");
    draw_panels(&path, &metrics, &groups, &cells)?;
    Ok(path)
}

fn draw_panels(path: &Path, metrics: &[String], groups: &[String], cells: &[(String, String, f64)]) -> Result<()> {
    let root = BitMapBackend::new(path, (960, 560)).into_drawing_area();
    root.fill(&WHITE)?;
    let cols = metrics.len().clamp(1, 3);
    let panels = root.split_evenly((metrics.len().div_ceil(cols).max(1), cols));
    for (panel, metric) in panels.iter().zip(metrics) {
        let series: Vec<(String, Vec<f64>)> = groups
            .iter()
            .map(|g| (g.clone(), vec![cells.iter().find(|(cg, cm, _)| cg == g && cm == metric).map_or(f64::NAN, |c| c.2)]))
            .collect();
        bars_on(panel, metric, std::slice::from_ref(metric), &series)?;
    }
    root.present()?;
    Ok(())
}

fn geometry(table: &Path, out_dir: &Path) -> Result<PathBuf> {
    let t = Table::read(table)?;
    let id = t.column("identity").context("geometry CSV needs an identity column")?;
    let cats: Vec<String> = (0..t.rows.len()).map(|r| format!("id {}", t.rows[r][id])).collect();
    let series: Vec<(String, Vec<f64>)> = ["median", "mean"]
        .iter()
        .filter_map(|n| t.column(n).map(|c| (n.to_string(), (0..t.rows.len()).map(|r| t.number(r, c)).collect())))
        .collect();
    let stem = table.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let path = out_dir.join(format!("{stem}.png"));
    bar_figure("scan-to-surface distance", &cats, &series, &path)?;
    Ok(path)
}

fn sorted_matching(dir: &Path, pred: impl Fn(&str) -> bool) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(&pred))
        .collect();
    v.sort();
    v
}

/// Draw every figure family present in `run_dir` into `run_dir/figures`.
pub fn plot_run(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let out = run_dir.join("figures");
    let mut written = Vec::new();
    let mut expected = Vec::new();
    std::fs::create_dir_all(&out)?;
    for stage in [Stage::I, Stage::II, Stage::III] {
        for (suffix, title) in [("metrics", "training losses"), ("eval", "held-out evaluation")] {
            let name = format!("{}_{suffix}.csv", stage.as_str());
            let p = run_dir.join(&name);
            expected.push(name);
            if p.exists() {
                let f = out.join(format!("{}_{suffix}.png", stage.as_str()));
                line_figure(&Table::read(&p)?, &format!("{} {title}", stage.as_str()), &f)?;
                written.push(f);
            }
        }
    }
    let eval = run_dir.join("eval");
    let summaries = sorted_matching(&eval, |n| n.starts_with("2d_") && n.ends_with("_summary.csv"));
    expected.push("eval/2d_<model>_summary.csv".into());
    if !summaries.is_empty() {
        written.push(metrics_2d(&summaries, &out)?);
    }
    expected.push("eval/3d_*.csv".into());
    for g in sorted_matching(&eval, |n| n.starts_with("3d_") && n.ends_with(".csv")) {
        written.push(geometry(&g, &out)?);
    }
    if written.is_empty() {
        bail!("no metrics CSVs in {}; expected any of: {}", run_dir.display(), expected.join(", "));
    }
    Ok(written)
}
