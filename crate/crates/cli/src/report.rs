use std::collections::BTreeMap;
use std::path::Path;

use segxal_core::metrics::MetricsReport;
use segxal_core::orchestrator::RunConfig;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Json,
    Md,
}

pub struct Table {
    pub num_classes: usize,
    pub rows: Vec<MetricsReport>,
}

fn empty(run: &Path, why: &str) -> CliError {
    CliError::new(5, format!("{}: {why}", run.display()))
}

/// Metrics of cycles 1.. in order. Cycle 0 (the initial model) is not a
/// row of the table.
pub fn load(run: &Path) -> Result<Table, CliError> {
    if !run.is_dir() {
        return Err(empty(run, "no such run directory"));
    }
    let mut by_cycle = BTreeMap::new();
    for entry in std::fs::read_dir(run).map_err(|e| CliError::new(1, format!("{}: {e}", run.display())))? {
        let path = entry.map_err(|e| CliError::new(1, e.to_string()))?.path();
        let Some(k) = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("cycle_"))
            .and_then(|k| k.parse::<usize>().ok())
        else {
            continue;
        };
        let metrics = path.join("metrics.json");
        if k == 0 || !metrics.is_file() {
            continue;
        }
        let bytes = std::fs::read(&metrics).map_err(|e| CliError::new(1, format!("{}: {e}", metrics.display())))?;
        let m: MetricsReport =
            serde_json::from_slice(&bytes).map_err(|e| CliError::new(1, format!("{}: {e}", metrics.display())))?;
        by_cycle.insert(k, m);
    }
    if by_cycle.is_empty() {
        return Err(empty(run, "no completed cycles"));
    }
    let rows: Vec<MetricsReport> = by_cycle.into_values().collect();
    let num_classes = match std::fs::read(run.join("config.json")) {
        Ok(b) => serde_json::from_slice::<RunConfig>(&b)
            .map_err(|e| CliError::new(1, format!("config.json: {e}")))?
            .model
            .num_classes,
        Err(_) => rows
            .iter()
            .flat_map(|r| r.per_class_iou.keys())
            .max()
            .map_or(0, |&c| c as usize + 1),
    };
    Ok(Table { num_classes, rows })
}

impl Table {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["cycle".to_string()];
        h.extend((0..self.num_classes).map(|c| format!("iou_{c}")));
        h.push("miou".into());
        h.push("samples_labeled".into());
        h
    }

    fn iou(r: &MetricsReport, c: usize) -> Option<f64> {
        r.per_class_iou.get(&(c as u8)).copied().filter(|v| v.is_finite())
    }

    pub fn csv(&self) -> Result<String, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| CliError::new(1, e.to_string());
        w.write_record(self.header()).map_err(err)?;
        for r in &self.rows {
            let mut rec = vec![r.cycle.to_string()];
            rec.extend((0..self.num_classes).map(|c| Self::iou(r, c).map(|v| v.to_string()).unwrap_or_default()));
            rec.push(r.miou.to_string());
            rec.push(r.samples_labeled.to_string());
            w.write_record(&rec).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::new(1, e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn json(&self) -> String {
        let rows: Vec<serde_json::Value> = self
            .rows
            .iter()
            .map(|r| {
                let mut o = serde_json::Map::new();
                o.insert("cycle".into(), r.cycle.into());
                for c in 0..self.num_classes {
                    o.insert(format!("iou_{c}"), Self::iou(r, c).into());
                }
                o.insert("miou".into(), r.miou.into());
                o.insert("samples_labeled".into(), r.samples_labeled.into());
                serde_json::Value::Object(o)
            })
            .collect();
        serde_json::to_string_pretty(&rows).expect("plain values serialise") + "\n"
    }

    /// Percent values, one row per cycle, labeled-set size next to the cycle.
    pub fn markdown(&self) -> String {
        let mut out = String::from("| Cycle | Labeled |");
        for c in 0..self.num_classes {
            out.push_str(&format!(" Class {c} |"));
        }
        out.push_str(" mIoU |\n|---:|---:|");
        out.push_str(&"---:|".repeat(self.num_classes + 1));
        out.push('\n');
        let pct = |v: Option<f64>| v.map(|v| format!("{:.2}", 100.0 * v)).unwrap_or_else(|| "-".into());
        for r in &self.rows {
            out.push_str(&format!("| {} | {} |", r.cycle, r.samples_labeled));
            for c in 0..self.num_classes {
                out.push_str(&format!(" {} |", pct(Self::iou(r, c))));
            }
            out.push_str(&format!(" {} |\n", pct(Some(r.miou))));
        }
        out
    }

    pub fn render(&self, format: Format) -> Result<String, CliError> {
        match format {
            Format::Csv => self.csv(),
            Format::Json => Ok(self.json()),
            Format::Md => Ok(self.markdown()),
        }
    }
}
