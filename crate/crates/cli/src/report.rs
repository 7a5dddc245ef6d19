//! Run reports: per-slice metric rows, aggregate means and the three output
//! formats (CSV for machines, aligned text for humans, JSON for tooling).
//!
//! Reports contain no timestamps or timing, so two runs of the same config
//! produce byte-identical files; wall-clock measurements go to a separate
//! timing file.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use rnst_core::metrics::MetricReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRow {
    pub label: String,
    pub index: usize,
    /// Input metrics against the reference; absent without a reference.
    pub input: Option<MetricReport>,
    /// Reconstruction metrics against the reference.
    pub recon: Option<MetricReport>,
}

/// Mean PSNR/SSIM over the slices of one column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanPair {
    #[serde(with = "rnst_core::metrics::psnr_serde")]
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Aggregate {
    /// Present when every row has input metrics.
    pub input: Option<MeanPair>,
    /// Present when every row has reconstruction metrics.
    pub recon: Option<MeanPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub weights_checksum: String,
    pub rows: Vec<SliceRow>,
    pub aggregate: Aggregate,
}

impl RunReport {
    pub fn new(weights_checksum: String, mut rows: Vec<SliceRow>) -> Self {
        rows.sort_by(|a, b| a.index.cmp(&b.index));
        let aggregate = compute_aggregate(&rows);
        RunReport {
            schema_version: crate::config::SCHEMA_VERSION,
            weights_checksum,
            rows,
            aggregate,
        }
    }

    /// `label,index,psnr_in,ssim_in,psnr_recon,ssim_recon` with a header
    /// row; infinite PSNR prints as `inf`, missing metrics as empty fields.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,index,psnr_in,ssim_in,psnr_recon,ssim_recon\n");
        for row in &self.rows {
            let (pi, si) = metric_fields(&row.input);
            let (pr, sr) = metric_fields(&row.recon);
            writeln!(out, "{},{},{pi},{si},{pr},{sr}", row.label, row.index).unwrap();
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:<10} {:>6} {:>12} {:>10} {:>12} {:>10}",
            "label", "index", "psnr_in", "ssim_in", "psnr_recon", "ssim_recon").unwrap();
        for row in &self.rows {
            let fmt = |m: &Option<MetricReport>| match m {
                Some(m) => (format_db(m.psnr_db), format!("{:.4}", m.ssim)),
                None => ("-".into(), "-".into()),
            };
            let (pi, si) = fmt(&row.input);
            let (pr, sr) = fmt(&row.recon);
            writeln!(out, "{:<10} {:>6} {:>12} {:>10} {:>12} {:>10}",
                row.label, row.index, pi, si, pr, sr).unwrap();
        }
        if self.aggregate.input.is_some() || self.aggregate.recon.is_some() {
            let fmt = |m: Option<MeanPair>| match m {
                Some(m) => (format_db(m.psnr), format!("{:.4}", m.ssim)),
                None => ("-".into(), "-".into()),
            };
            let (pi, si) = fmt(self.aggregate.input);
            let (pr, sr) = fmt(self.aggregate.recon);
            writeln!(out, "{:<10} {:>6} {:>12} {:>10} {:>12} {:>10}",
                "mean", "", pi, si, pr, sr).unwrap();
        }
        writeln!(out, "\nweights sha256: {}", self.weights_checksum).unwrap();
        out
    }

    pub fn write_all(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join("report.csv"), self.to_csv()).context("writing report.csv")?;
        std::fs::write(dir.join("report.txt"), self.to_text()).context("writing report.txt")?;
        let json = serde_json::to_string_pretty(self).context("serializing report")?;
        std::fs::write(dir.join("report.json"), json).context("writing report.json")?;
        Ok(())
    }
}

fn format_db(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "inf".into()
    }
}

fn metric_fields(m: &Option<MetricReport>) -> (String, String) {
    match m {
        Some(m) => {
            let p = if m.psnr_db.is_finite() {
                format!("{}", m.psnr_db)
            } else {
                "inf".into()
            };
            (p, format!("{}", m.ssim))
        }
        None => (String::new(), String::new()),
    }
}

fn compute_aggregate(rows: &[SliceRow]) -> Aggregate {
    let side = |pick: fn(&SliceRow) -> Option<&MetricReport>| -> Option<MeanPair> {
        let metrics: Vec<&MetricReport> = rows.iter().filter_map(pick).collect();
        if rows.is_empty() || metrics.len() != rows.len() {
            return None;
        }
        let n = metrics.len() as f64;
        Some(MeanPair {
            psnr: metrics.iter().map(|m| m.psnr_db).sum::<f64>() / n,
            ssim: metrics.iter().map(|m| m.ssim).sum::<f64>() / n,
        })
    };
    Aggregate {
        input: side(|r| r.input.as_ref()),
        recon: side(|r| r.recon.as_ref()),
    }
}

/// Per-slice wall-clock seconds, written separately so reports stay
/// byte-reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timing {
    pub per_slice_seconds: Vec<(usize, f64)>,
    pub total_seconds: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(psnr: f64) -> MetricReport {
        MetricReport {
            psnr_db: psnr,
            ssim: 0.5,
            dynamic_range_l: 1.0,
            window: 7,
        }
    }

    #[test]
    fn csv_uses_inf_literal() {
        let rep = RunReport::new(
            "abc".into(),
            vec![SliceRow {
                label: "t".into(),
                index: 1,
                input: Some(report(f64::INFINITY)),
                recon: Some(report(30.0)),
            }],
        );
        let csv = rep.to_csv();
        assert!(csv.lines().nth(1).unwrap().contains("inf"), "{csv}");
    }

    #[test]
    fn aggregate_is_arithmetic_mean() {
        let rep = RunReport::new(
            "abc".into(),
            vec![
                SliceRow {
                    label: "t".into(),
                    index: 1,
                    input: Some(report(10.0)),
                    recon: Some(report(20.0)),
                },
                SliceRow {
                    label: "t".into(),
                    index: 2,
                    input: Some(report(14.0)),
                    recon: Some(report(26.0)),
                },
            ],
        );
        let input = rep.aggregate.input.unwrap();
        let recon = rep.aggregate.recon.unwrap();
        assert!((input.psnr - 12.0).abs() < 1e-9);
        assert!((recon.psnr - 23.0).abs() < 1e-9);
    }

    #[test]
    fn rows_sorted_by_index() {
        let rep = RunReport::new(
            "abc".into(),
            vec![
                SliceRow { label: "t".into(), index: 5, input: None, recon: None },
                SliceRow { label: "t".into(), index: 2, input: None, recon: None },
            ],
        );
        assert_eq!(rep.rows[0].index, 2);
        assert!(rep.aggregate.input.is_none() && rep.aggregate.recon.is_none());
    }

    #[test]
    fn json_round_trips() {
        let rep = RunReport::new(
            "abc".into(),
            vec![SliceRow {
                label: "t".into(),
                index: 1,
                input: Some(report(f64::INFINITY)),
                recon: Some(report(31.5)),
            }],
        );
        let json = serde_json::to_string(&rep).unwrap();
        let back: RunReport = serde_json::from_str(&json).unwrap();
        assert_eq!(rep, back);
    }
}
