//! ROC comparison of the three scores, CSV point files and small SVG plots.

use std::fmt::Write as _;
use std::path::Path;

use super::AucSummary;
use crate::anomaly::{labels_of, roc, AnomalyRecord, RocCurve, ScoreKind};
use crate::capsnet::write_atomic;
use crate::error::Result;
use crate::Label;

pub const AUC_SUMMARY_FILE: &str = "auc.csv";
pub const ROC_SVG_FILE: &str = "roc.svg";
pub const HISTOGRAM_SVG_FILE: &str = "scores.svg";

/// ROC curves of `z_a - z_n`, `r_l` and the combined score.
#[derive(Clone, Debug, PartialEq)]
pub struct RocComparison {
    pub curves: Vec<(ScoreKind, RocCurve)>,
}

impl RocComparison {
    pub fn auc(&self, kind: ScoreKind) -> f64 {
        self.curves.iter().find(|(k, _)| *k == kind).map(|(_, c)| c.auc).unwrap_or(f64::NAN)
    }

    pub fn summary(&self) -> AucSummary {
        AucSummary {
            length_difference: self.auc(ScoreKind::LengthDifference),
            reconstruction: self.auc(ScoreKind::Reconstruction),
            combined: self.auc(ScoreKind::Combined),
        }
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("score,auc\n");
        for (k, c) in &self.curves {
            let _ = writeln!(out, "{},{}", k.title(), c.auc);
        }
        out
    }
}

pub fn roc_comparison(records: &[AnomalyRecord]) -> Result<RocComparison> {
    let labels = labels_of(records)?;
    let curves = ScoreKind::ALL
        .iter()
        .map(|&k| {
            let scores: Vec<f64> = records.iter().map(|r| k.of(r)).collect();
            Ok((k, roc(&scores, &labels)?))
        })
        .collect::<Result<_>>()?;
    Ok(RocComparison { curves })
}

/// Writes `roc-*.csv`, `auc.csv` and `roc.svg` into `dir`.
pub fn emit_roc_comparison(records: &[AnomalyRecord], dir: &Path) -> Result<RocComparison> {
    let cmp = roc_comparison(records)?;
    for (k, c) in &cmp.curves {
        write_atomic(&dir.join(format!("{}.csv", k.file_stem())), c.to_csv().as_bytes())?;
    }
    write_atomic(&dir.join(AUC_SUMMARY_FILE), cmp.summary_csv().as_bytes())?;
    write_atomic(&dir.join(ROC_SVG_FILE), roc_svg(&cmp).as_bytes())?;
    Ok(cmp)
}

const SIZE: f64 = 360.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 3] = ["#1f77b4", "#2ca02c", "#d62728"];

fn svg_open(out: &mut String, w: f64, h: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
}

fn axes(out: &mut String, x_label: &str, y_label: &str) {
    let (x0, y0, x1, y1) = (MARGIN, MARGIN + SIZE, MARGIN + SIZE, MARGIN);
    let _ = writeln!(out, r#"<rect x="{x0}" y="{y1}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, (x0 + x1) / 2.0, y0 + 32.0);
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{y_label}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
}

/// The three ROC curves on the unit square with an AUC legend.
pub fn roc_svg(cmp: &RocComparison) -> String {
    let mut out = String::new();
    let side = SIZE + 2.0 * MARGIN;
    svg_open(&mut out, side + 150.0, side);
    axes(&mut out, "false positive rate", "true positive rate");
    let px = |x: f64| MARGIN + x * SIZE;
    let py = |y: f64| MARGIN + (1.0 - y) * SIZE;
    for t in [0.0, 0.5, 1.0] {
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{t}</text>"#, px(t), py(0.0) + 14.0);
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{t}</text>"#, px(0.0) - 4.0, py(t) + 4.0);
    }
    let _ = writeln!(
        out,
        r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#999" stroke-dasharray="4 3"/>"##,
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    );
    for (i, (kind, curve)) in cmp.curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = curve.points.iter().map(|&(f, t)| format!("{:.2},{:.2}", px(f), py(t))).collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        let ly = MARGIN + 16.0 + 18.0 * i as f64;
        let lx = side + 4.0;
        let _ = writeln!(out, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 18.0);
        let _ = writeln!(out, r#"<text x="{}" y="{}">{} ({:.3})</text>"#, lx + 22.0, ly + 4.0, kind.title(), curve.auc);
    }
    out.push_str("</svg>\n");
    out
}

/// Histogram of combined scores by label with the threshold marked.
pub fn score_histogram_svg(records: &[AnomalyRecord], threshold: f64) -> String {
    const BINS: usize = 40;
    let scores = records.iter().map(|r| r.score).chain(std::iter::once(threshold));
    let (lo, hi) = scores.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s), hi.max(s)));
    let width = if hi > lo { hi - lo } else { 1.0 };
    let bin = |s: f64| (((s - lo) / width * BINS as f64) as usize).min(BINS - 1);
    let mut counts = [[0usize; BINS]; 2];
    for r in records {
        let row = usize::from(r.label == Some(Label::Anomaly));
        counts[row][bin(r.score)] += 1;
    }
    let peak = counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;

    let mut out = String::new();
    let side = SIZE + 2.0 * MARGIN;
    svg_open(&mut out, side + 110.0, side);
    axes(&mut out, "score", "count");
    let bw = SIZE / BINS as f64;
    for (row, color) in [(0usize, COLORS[0]), (1, COLORS[2])] {
        for (b, &c) in counts[row].iter().enumerate() {
            if c == 0 {
                continue;
            }
            let h = c as f64 / peak * SIZE;
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.5"/>"#,
                MARGIN + b as f64 * bw,
                MARGIN + SIZE - h,
                bw,
                h
            );
        }
    }
    let tx = MARGIN + (threshold - lo) / width * SIZE;
    let _ = writeln!(out, r#"<line x1="{tx:.2}" y1="{MARGIN}" x2="{tx:.2}" y2="{}" stroke="black" stroke-width="1.5"/>"#, MARGIN + SIZE);
    let _ = writeln!(out, r#"<text x="{:.2}" y="{}" text-anchor="middle">threshold {threshold:.3}</text>"#, tx, MARGIN - 6.0);
    let _ = writeln!(out, r#"<text x="{MARGIN}" y="{}">{lo:.2}</text>"#, MARGIN + SIZE + 14.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{hi:.2}</text>"#, MARGIN + SIZE, MARGIN + SIZE + 14.0);
    for (i, (name, color)) in [("normal", COLORS[0]), ("anomaly", COLORS[2])].iter().enumerate() {
        let ly = MARGIN + 16.0 + 18.0 * i as f64;
        let lx = side + 4.0;
        let _ = writeln!(out, r#"<rect x="{lx}" y="{}" width="14" height="10" fill="{color}" fill-opacity="0.5"/>"#, ly - 8.0);
        let _ = writeln!(out, r#"<text x="{}" y="{}">{name}</text>"#, lx + 20.0, ly + 1.0);
    }
    out.push_str("</svg>\n");
    out
}

pub(crate) fn write_histogram(records: &[AnomalyRecord], threshold: f64, dir: &Path) -> Result<()> {
    write_atomic(&dir.join(HISTOGRAM_SVG_FILE), score_histogram_svg(records, threshold).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    fn rec(z_n: f64, z_a: f64, r_l: f64, label: Label) -> AnomalyRecord {
        AnomalyRecord::new(z_n, z_a, r_l, Some(label)).unwrap()
    }

    #[test]
    fn identically_ranked_scores_give_identical_curves() {
        // z_a - z_n, r_l and their sum all increase together
        let records: Vec<AnomalyRecord> = (0..8)
            .map(|i| {
                let t = i as f64 / 10.0;
                rec(0.9 - t, 0.1 + t, t / 4.0, if i % 3 == 0 { Label::Anomaly } else { Label::Normal })
            })
            .collect();
        let cmp = roc_comparison(&records).unwrap();
        assert_eq!(cmp.curves[0].1, cmp.curves[1].1);
        assert_eq!(cmp.curves[1].1, cmp.curves[2].1);
    }

    #[test]
    fn single_class_is_refused() {
        let records = vec![rec(0.5, 0.1, 0.0, Label::Normal), rec(0.6, 0.2, 0.1, Label::Normal)];
        assert!(matches!(roc_comparison(&records), Err(Error::Data(_))));
    }

    #[test]
    fn emits_files() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![rec(0.9, 0.1, 0.01, Label::Normal), rec(0.2, 0.8, 0.05, Label::Anomaly)];
        let cmp = emit_roc_comparison(&records, dir.path()).unwrap();
        assert_eq!(cmp.summary().combined, 1.0);
        for f in ["roc-length-diff.csv", "roc-recon.csv", "roc-combined.csv", AUC_SUMMARY_FILE, ROC_SVG_FILE] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        let svg = score_histogram_svg(&records, 0.0);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }
}
