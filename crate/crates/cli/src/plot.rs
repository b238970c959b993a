use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use umct::trainer::experiment::{RunSummary, CONFIG_JSON, METRICS_CSV, SUMMARY_JSON};
use umct::trainer::ExperimentConfig;
use umct::Mode;

use crate::{invalid, require_file, CliError, CliResult};

const REQUIRED: [&str; 5] = ["iter", "mode", "stage", "total", "probe_dsc"];

struct Run {
    name: String,
    header: csv::StringRecord,
    rows: Vec<csv::StringRecord>,
    summary: Option<(ExperimentConfig, RunSummary)>,
}

impl Run {
    fn col(&self, name: &str) -> usize {
        self.header.iter().position(|h| h == name).expect("checked on load")
    }

    /// `(iter, stage, cell)` for every row whose `column` cell is filled.
    fn series<'a>(&'a self, column: &str) -> impl Iterator<Item = (&'a str, &'a str, &'a str)> {
        let (i, s, c) = (self.col("iter"), self.col("stage"), self.col(column));
        self.rows.iter().filter(move |r| !r[c].is_empty()).map(move |r| (&r[i], &r[s], &r[c]))
    }
}

fn load_run(dir: &Path) -> CliResult<Run> {
    let metrics = dir.join(METRICS_CSV);
    require_file(&metrics)?;
    let mut rdr = csv::Reader::from_path(&metrics)?;
    let header = rdr.headers()?.clone();
    for col in REQUIRED {
        if !header.iter().any(|h| h == col) {
            return Err(invalid(format!("{}: schema mismatch, no {col:?} column", metrics.display())));
        }
    }
    let rows = rdr.records().collect::<Result<Vec<_>, _>>()?;
    let summary_path = dir.join(SUMMARY_JSON);
    let summary = if summary_path.exists() {
        let cfg: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(dir.join(CONFIG_JSON))?)?;
        let s: RunSummary = serde_json::from_str(&std::fs::read_to_string(&summary_path)?)?;
        Some((cfg, s))
    } else {
        None
    };
    let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
    Ok(Run { name, header, rows, summary })
}

fn num(cell: &str, what: &str) -> CliResult<f64> {
    cell.parse().map_err(|_| invalid(format!("{what}: {cell:?} is not a number")))
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(anyhow::anyhow!("{e}"))
}

type Series = Vec<(String, Vec<(f64, f64)>)>;

fn line_chart(path: &Path, title: &str, x_label: &str, y_label: &str, series: &Series) -> CliResult {
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1e-3;
    }
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(runtime)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(runtime)?;
    chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw().map_err(runtime)?;
    for (k, (name, p)) in series.iter().enumerate() {
        let color = Palette99::pick(k).to_rgba();
        chart
            .draw_series(LineSeries::new(p.iter().copied(), color))
            .map_err(runtime)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(runtime)?;
    root.present().map_err(runtime)?;
    Ok(())
}

/// Writes `<stem>.csv` (source cells copied verbatim) and `<stem>.svg`.
fn curve(runs: &[Run], out: &Path, stem: &str, column: &str, title: &str) -> CliResult {
    let mut w = csv::Writer::from_path(out.join(format!("{stem}.csv")))?;
    w.write_record(["run", "iter", "stage", column])?;
    let mut series = Series::new();
    for run in runs {
        let mut by_stage: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for (it, stage, cell) in run.series(column) {
            w.write_record([run.name.as_str(), it, stage, cell])?;
            by_stage.entry(stage.to_string()).or_default().push((num(it, "iter")?, num(cell, column)?));
        }
        series.extend(by_stage.into_iter().map(|(s, p)| (format!("{} stage {s}", run.name), p)));
    }
    w.flush()?;
    line_chart(&out.join(format!("{stem}.svg")), title, "iteration", column, &series)
}

fn label_ratio(runs: &[Run], out: &Path) -> CliResult {
    let mut w = csv::Writer::from_path(out.join("label_ratio.csv"))?;
    w.write_record(["run", "mode", "labeled_pct", "ensemble_dsc"])?;
    let mut groups: BTreeMap<&'static str, Vec<(f64, f64)>> = BTreeMap::new();
    for run in runs {
        let Some((cfg, s)) = &run.summary else { continue };
        if matches!(s.mode, Mode::UdaNoSource) {
            continue;
        }
        let d = &cfg.data;
        let pct = 100.0 * d.n_labeled as f64 / (d.n_labeled + d.n_unlabeled) as f64;
        let dsc = s.result.ensemble_dsc;
        w.write_record([run.name.clone(), s.mode.to_string(), pct.to_string(), dsc.to_string()])?;
        let key = if s.mode == Mode::SupervisedOnly { "supervised" } else { "co-training" };
        groups.entry(key).or_default().push((pct, dsc));
    }
    w.flush()?;
    let series: Series = groups
        .into_iter()
        .map(|(k, mut p)| {
            p.sort_by(|a, b| a.0.total_cmp(&b.0));
            (k.to_string(), p)
        })
        .collect();
    line_chart(&out.join("label_ratio.svg"), "DSC vs labeled share", "% labeled", "ensemble DSC", &series)
}

pub fn run(dirs: &[PathBuf], out: &Path) -> CliResult {
    let runs = dirs.iter().map(|d| load_run(d)).collect::<CliResult<Vec<_>>>()?;
    std::fs::create_dir_all(out)?;
    curve(&runs, out, "loss_curves", "total", "Total loss")?;
    curve(&runs, out, "agreement", "probe_dsc", "Inter-view agreement (probe DSC)")?;
    label_ratio(&runs, out)?;
    println!("{}", out.display());
    Ok(())
}
