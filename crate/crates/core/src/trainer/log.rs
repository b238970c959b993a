//! Per-iteration training metrics.

use std::io::Write;
use std::path::Path;

use crate::error::Result;
use crate::volume::Mode;

/// One CSV row; `None` cells are written empty.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub iter: u64,
    pub mode: Mode,
    pub stage: u8,
    pub sup: Vec<Option<f64>>,
    pub cot: Vec<Option<f64>>,
    pub total: Option<f64>,
    pub uncertainty: Vec<Option<f64>>,
    pub confidence: Vec<Option<f64>>,
    pub probe_dsc: Option<f64>,
}

impl MetricRow {
    pub fn new(iter: u64, mode: Mode, stage: u8, n_views: usize) -> Self {
        MetricRow {
            iter,
            mode,
            stage,
            sup: vec![None; n_views],
            cot: vec![None; n_views],
            total: None,
            uncertainty: vec![None; n_views],
            confidence: vec![None; n_views],
            probe_dsc: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsLog {
    pub n_views: usize,
    pub rows: Vec<MetricRow>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

impl MetricsLog {
    pub fn new(n_views: usize) -> Self {
        MetricsLog { n_views, rows: Vec::new() }
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["iter".to_string(), "mode".into(), "stage".into()];
        let n = self.n_views;
        h.extend((0..n).map(|i| format!("sup_v{i}")));
        h.extend((0..n).map(|i| format!("cot_v{i}")));
        h.push("total".into());
        h.extend((0..n).map(|i| format!("ue_v{i}")));
        h.extend((0..n).map(|i| format!("c_v{i}")));
        h.push("probe_dsc".into());
        h
    }

    pub fn push(&mut self, row: MetricRow) {
        debug_assert_eq!(row.sup.len(), self.n_views);
        self.rows.push(row);
    }

    /// Rows of one stage.
    pub fn stage(&self, stage: u8) -> impl Iterator<Item = &MetricRow> {
        self.rows.iter().filter(move |r| r.stage == stage)
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header().join(",");
        out.push('\n');
        for r in &self.rows {
            let mut cells = vec![r.iter.to_string(), r.mode.as_str().to_string(), r.stage.to_string()];
            cells.extend(r.sup.iter().map(|&v| cell(v)));
            cells.extend(r.cot.iter().map(|&v| cell(v)));
            cells.push(cell(r.total));
            cells.extend(r.uncertainty.iter().map(|&v| cell(v)));
            cells.extend(r.confidence.iter().map(|&v| cell(v)));
            cells.push(cell(r.probe_dsc));
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}
