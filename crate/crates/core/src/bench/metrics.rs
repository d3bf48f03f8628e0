//! The metrics CSV.
//!
//! ```text
//! # foe-tta-metrics v1
//! run_id,subject_id,domain,method,epoch,dice_mean,dice_per_class,loss_total,loss_cnn,loss_pca,phi_norm,wall_ms
//! ```
//!
//! `dice_per_class` holds the foreground classes separated by `;`. Loss fields
//! are empty for rows that have no loss (plain evaluation). Floats are written
//! with Rust's shortest round-trip formatting, so files re-read bitwise.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tta::TtaTrace;

pub const METRICS_VERSION_LINE: &str = "# foe-tta-metrics v1";
pub const METRICS_HEADER: &str =
    "run_id,subject_id,domain,method,epoch,dice_mean,dice_per_class,loss_total,loss_cnn,loss_pca,phi_norm,wall_ms";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub subject_id: String,
    pub domain: u32,
    pub method: String,
    pub epoch: usize,
    pub dice_mean: f64,
    pub dice_per_class: Vec<f64>,
    pub loss_total: Option<f64>,
    pub loss_cnn: Option<f64>,
    pub loss_pca: Option<f64>,
    pub phi_norm: Option<f64>,
    pub wall_ms: u128,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(field: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field.parse().map(Some).map_err(|_| Error::format(format!("bad number '{field}' in metrics")))
}

impl MetricsRow {
    pub fn from_trace(run_id: &str, subject_id: &str, domain: u32, method: &str, trace: &TtaTrace) -> Vec<Self> {
        trace
            .rows
            .iter()
            .map(|r| MetricsRow {
                run_id: run_id.to_string(),
                subject_id: subject_id.to_string(),
                domain,
                method: method.to_string(),
                epoch: r.epoch,
                dice_mean: r.dice_mean,
                dice_per_class: r.dice_per_class.clone(),
                loss_total: Some(r.loss_total),
                loss_cnn: Some(r.loss_cnn),
                loss_pca: Some(r.loss_pca),
                phi_norm: Some(r.phi_norm),
                wall_ms: r.wall_ms,
            })
            .collect()
    }

    fn to_line(&self) -> String {
        for s in [&self.run_id, &self.subject_id, &self.method] {
            debug_assert!(!s.contains(',') && !s.contains('\n'));
        }
        let per_class = self.dice_per_class.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(";");
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.subject_id,
            self.domain,
            self.method,
            self.epoch,
            self.dice_mean,
            per_class,
            opt(self.loss_total),
            opt(self.loss_cnn),
            opt(self.loss_pca),
            opt(self.phi_norm),
            self.wall_ms
        )
    }

    fn from_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            return Err(Error::format(format!("metrics row has {} fields, expected 12", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::format(format!("bad number '{s}' in metrics")));
        let int = |s: &str| s.parse::<u128>().map_err(|_| Error::format(format!("bad integer '{s}' in metrics")));
        let dice_per_class =
            if f[6].is_empty() { Vec::new() } else { f[6].split(';').map(num).collect::<Result<_>>()? };
        Ok(MetricsRow {
            run_id: f[0].to_string(),
            subject_id: f[1].to_string(),
            domain: int(f[2])? as u32,
            method: f[3].to_string(),
            epoch: int(f[4])? as usize,
            dice_mean: num(f[5])?,
            dice_per_class,
            loss_total: parse_opt(f[7])?,
            loss_cnn: parse_opt(f[8])?,
            loss_pca: parse_opt(f[9])?,
            phi_norm: parse_opt(f[10])?,
            wall_ms: int(f[11])?,
        })
    }
}

pub fn render_metrics(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_VERSION_LINE}\n{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(render_metrics(rows).as_bytes())?;
    Ok(())
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_VERSION_LINE) {
        return Err(Error::format(format!("metrics file does not start with '{METRICS_VERSION_LINE}'")));
    }
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::format("unexpected metrics header"));
    }
    lines.filter(|l| !l.is_empty()).map(MetricsRow::from_line).collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    parse_metrics(&fs::read_to_string(path)?)
}
