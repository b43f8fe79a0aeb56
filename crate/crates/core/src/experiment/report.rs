use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{fraction_label, ExperimentConfig, CLASS_REPORT_FILE};
use crate::anomaly::LogisticThreshold;
use crate::data::{Dataset, NUM_CLASSES};
use crate::error::{usage_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucSummary {
    pub length_difference: f64,
    pub reconstruction: f64,
    pub combined: f64,
}

/// Results of one (class, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub dataset: Dataset,
    pub class: u8,
    pub anomaly_fraction: f64,
    pub seed: u64,
    pub train_size: usize,
    pub train_anomalies: usize,
    pub test_size: usize,
    pub threshold: LogisticThreshold,
    /// Accuracy of `score > threshold`.
    pub accuracy: f64,
    /// Accuracy of `z_a > z_n`.
    pub baseline_accuracy: f64,
    pub auc: AucSummary,
    pub recon_mse_normal: f64,
    pub recon_mse_anomaly: f64,
    /// Git blob hash of the checkpoint bytes.
    pub checkpoint_hash: String,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

/// One class's cell, averaged over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCell {
    pub class: u8,
    pub accuracy: f64,
    pub baseline_accuracy: f64,
    pub seeds: usize,
}

/// Aggregate of a sweep, with the effective configuration echoed back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub runs: Vec<ClassReport>,
    pub per_class: Vec<ClassCell>,
    /// Mean of `per_class[*].accuracy`.
    pub accuracy_avg: f64,
    /// Mean of `per_class[*].baseline_accuracy`.
    pub baseline_accuracy_avg: f64,
    pub single_seed: bool,
    pub runtime_seconds: f64,
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

impl RunReport {
    pub fn new(config: ExperimentConfig, runs: Vec<ClassReport>, runtime_seconds: f64) -> Result<Self> {
        if runs.is_empty() {
            return Err(usage_err!("no runs to report"));
        }
        let mut by_class: BTreeMap<u8, Vec<&ClassReport>> = BTreeMap::new();
        for r in &runs {
            by_class.entry(r.class).or_default().push(r);
        }
        let per_class: Vec<ClassCell> = by_class
            .into_iter()
            .map(|(class, rs)| ClassCell {
                class,
                accuracy: mean(rs.iter().map(|r| r.accuracy)),
                baseline_accuracy: mean(rs.iter().map(|r| r.baseline_accuracy)),
                seeds: rs.len(),
            })
            .collect();
        Ok(Self {
            single_seed: config.seeds().len() == 1,
            accuracy_avg: mean(per_class.iter().map(|c| c.accuracy)),
            baseline_accuracy_avg: mean(per_class.iter().map(|c| c.baseline_accuracy)),
            config,
            runs,
            per_class,
            runtime_seconds,
        })
    }
}

/// Finds every per-class report below `root`.
pub fn collect_class_reports(root: &Path) -> Result<Vec<ClassReport>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == CLASS_REPORT_FILE) {
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let report: ClassReport = serde_json::from_str(&text)
                    .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
                out.push(report);
            }
        }
    }
    out.sort_by(|a, b| {
        a.dataset
            .as_str()
            .cmp(b.dataset.as_str())
            .then(a.anomaly_fraction.total_cmp(&b.anomaly_fraction))
            .then(a.class.cmp(&b.class))
            .then(a.seed.cmp(&b.seed))
    });
    Ok(out)
}

/// One printed row: a dataset, a fraction, a decision rule, ten class cells
/// and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub dataset: Dataset,
    pub anomaly_fraction: f64,
    /// `standard` or `proposed`
    pub rule: String,
    pub cells: [Option<f64>; NUM_CLASSES],
    /// Mean of the present cells.
    pub avg: f64,
}

/// Groups reports by (dataset, fraction) and averages seeds into class cells.
pub fn aggregate_table(reports: &[ClassReport]) -> Vec<TableRow> {
    let mut groups: BTreeMap<(String, String), Vec<&ClassReport>> = BTreeMap::new();
    for r in reports {
        groups
            .entry((r.dataset.as_str().to_string(), fraction_label(r.anomaly_fraction)))
            .or_default()
            .push(r);
    }
    let mut rows = Vec::new();
    for rs in groups.values() {
        for (rule, pick) in [("standard", 0usize), ("proposed", 1)] {
            let mut cells = [None; NUM_CLASSES];
            for (class, cell) in cells.iter_mut().enumerate() {
                let vals: Vec<f64> = rs
                    .iter()
                    .filter(|r| r.class as usize == class)
                    .map(|r| if pick == 0 { r.baseline_accuracy } else { r.accuracy })
                    .collect();
                if !vals.is_empty() {
                    *cell = Some(mean(vals));
                }
            }
            rows.push(TableRow {
                dataset: rs[0].dataset,
                anomaly_fraction: rs[0].anomaly_fraction,
                rule: rule.to_string(),
                avg: mean(cells.iter().flatten().copied()),
                cells,
            });
        }
    }
    rows
}

/// Markdown table of accuracies in percent.
pub fn format_table(rows: &[TableRow]) -> String {
    let mut out = String::from("| dataset | fraction | rule |");
    for c in 0..NUM_CLASSES {
        out.push_str(&format!(" {c} |"));
    }
    out.push_str(" avg |\n|---|---|---|");
    out.push_str(&"---:|".repeat(NUM_CLASSES + 1));
    out.push('\n');
    for r in rows {
        out.push_str(&format!("| {} | {} | {} |", r.dataset, fraction_label(r.anomaly_fraction), r.rule));
        for cell in &r.cells {
            match cell {
                Some(v) => out.push_str(&format!(" {:.2} |", 100.0 * v)),
                None => out.push_str(" - |"),
            }
        }
        out.push_str(&format!(" {:.2} |\n", 100.0 * r.avg));
    }
    out
}
