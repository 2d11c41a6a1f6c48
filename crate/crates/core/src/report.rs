//! Comparison tables built from evaluation records.
//!
//! Rows are grouped into one block per acceleration; inside a block each
//! model label lists its anatomies in first-seen order followed by an `Avg`
//! row when it covers more than one anatomy.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::io_store::EvalRecord;

/// Display order of the known model labels; other labels follow alphabetically.
pub const LABEL_ORDER: [&str; 5] = ["Undersampled", "Independent", "Shared", "Proposed", "w/o MD"];

pub const AVG: &str = "Avg";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub model: String,
    pub anatomy: String,
    pub accel: f64,
    #[serde(rename = "PSNR(dB)")]
    pub psnr_db: f64,
    #[serde(rename = "SSIM(%)")]
    pub ssim_pct: f64,
    pub params: usize,
}

pub const COLUMNS: [&str; 6] = ["model", "anatomy", "accel", "PSNR(dB)", "SSIM(%)", "params"];

fn label_rank(label: &str) -> usize {
    LABEL_ORDER.iter().position(|l| *l == label).unwrap_or(LABEL_ORDER.len())
}

/// Model name shown in the table. Labels that appear with several distill
/// layers get the layer appended, e.g. `Proposed L3`.
fn display_labels(records: &[EvalRecord]) -> Vec<String> {
    records
        .iter()
        .map(|r| {
            let layers: BTreeSet<Option<usize>> = records
                .iter()
                .filter(|o| o.label == r.label)
                .map(|o| o.distill_layer)
                .collect();
            match r.distill_layer {
                Some(l) if layers.len() > 1 => format!("{} L{l}", r.label),
                _ => r.label.clone(),
            }
        })
        .collect()
}

/// Aggregates evaluation records into report rows.
///
/// The `Avg` row averages PSNR and SSIM over anatomies. Its parameter count
/// is the sum for `Independent` (one network per anatomy) and the largest
/// single count for every other label.
pub fn build_report(records: &[EvalRecord]) -> Result<Vec<ReportRow>> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no evaluation records to report".into()));
    }
    for r in records {
        if r.label.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "evaluation of `{}` at {}x has no model label",
                r.anatomy, r.accel
            )));
        }
    }
    let names = display_labels(records);
    let mut anatomies: Vec<&str> = Vec::new();
    for r in records {
        if !anatomies.contains(&r.anatomy.as_str()) {
            anatomies.push(&r.anatomy);
        }
    }
    let mut accels: Vec<f64> = Vec::new();
    for r in records {
        if !accels.contains(&r.accel) {
            accels.push(r.accel);
        }
    }
    accels.sort_by(f64::total_cmp);
    let mut models: Vec<(usize, Option<usize>, &str, &str)> = Vec::new();
    for (r, name) in records.iter().zip(&names) {
        let key = (label_rank(&r.label), r.distill_layer, r.label.as_str(), name.as_str());
        if !models.contains(&key) {
            models.push(key);
        }
    }
    models.sort();

    let mut rows = Vec::new();
    for &accel in &accels {
        for &(_, _, label, name) in &models {
            let mut block = Vec::new();
            for &anatomy in &anatomies {
                let hits: Vec<&EvalRecord> = records
                    .iter()
                    .zip(&names)
                    .filter(|(r, n)| n.as_str() == name && r.anatomy == anatomy && r.accel == accel)
                    .map(|(r, _)| r)
                    .collect();
                match hits.as_slice() {
                    [] => {}
                    [r] => block.push(ReportRow {
                        model: name.to_string(),
                        anatomy: anatomy.to_string(),
                        accel,
                        psnr_db: r.psnr_db,
                        ssim_pct: r.ssim_pct,
                        params: r.params,
                    }),
                    _ => {
                        return Err(Error::InvalidArgument(format!(
                            "{} evaluations of `{name}` on `{anatomy}` at {accel}x",
                            hits.len()
                        )))
                    }
                }
            }
            if block.len() > 1 {
                let n = block.len() as f64;
                let params = if label == "Independent" {
                    block.iter().map(|r| r.params).sum()
                } else {
                    block.iter().map(|r| r.params).max().unwrap_or(0)
                };
                let avg = ReportRow {
                    model: name.to_string(),
                    anatomy: AVG.to_string(),
                    accel,
                    psnr_db: block.iter().map(|r| r.psnr_db).sum::<f64>() / n,
                    ssim_pct: block.iter().map(|r| r.ssim_pct).sum::<f64>() / n,
                    params,
                };
                block.push(avg);
            }
            rows.extend(block);
        }
    }
    Ok(rows)
}

fn fmt_accel(a: f64) -> String {
    if a.fract() == 0.0 {
        format!("{a:.0}x")
    } else {
        format!("{a}x")
    }
}

fn fmt_db(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v:.2}")
    }
}

/// Aligned plain-text table with a blank line between acceleration blocks.
pub fn render_text(rows: &[ReportRow]) -> String {
    let cells: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                r.model.clone(),
                r.anatomy.clone(),
                fmt_accel(r.accel),
                fmt_db(r.psnr_db),
                format!("{:.2}", r.ssim_pct),
                r.params.to_string(),
            ]
        })
        .collect();
    let mut widths = COLUMNS.map(str::len);
    for c in &cells {
        for (w, s) in widths.iter_mut().zip(c) {
            *w = (*w).max(s.chars().count());
        }
    }
    let line = |c: &[String]| {
        let mut s = String::new();
        for (i, (v, w)) in c.iter().zip(widths).enumerate() {
            // text columns left, numbers right
            if i < 2 {
                s.push_str(&format!("{v:<w$}"));
            } else {
                s.push_str(&format!("{v:>w$}"));
            }
            if i + 1 < c.len() {
                s.push_str("  ");
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let header: Vec<String> = COLUMNS.iter().map(|s| s.to_string()).collect();
    let mut out = line(&header);
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for (i, (r, c)) in rows.iter().zip(&cells).enumerate() {
        if i > 0 && rows[i - 1].accel != r.accel {
            out.push('\n');
        }
        out.push_str(&line(c));
    }
    out
}

/// CSV with the header `model,anatomy,accel,PSNR(dB),SSIM(%),params`.
pub fn render_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(format!("csv: {e}")))?;
    }
    if rows.is_empty() {
        w.write_record(COLUMNS).map_err(|e| Error::Format(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(format!("csv: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(label: &str, anatomy: &str, accel: f64, psnr: f64, params: usize, layer: Option<usize>) -> EvalRecord {
        EvalRecord {
            label: label.into(),
            anatomy: anatomy.into(),
            split: "test".into(),
            accel,
            mask_seed: 0,
            params,
            distill_layer: layer,
            psnr_db: psnr,
            ssim_pct: psnr * 2.0,
            mae: 0.0,
            images: Vec::new(),
        }
    }

    #[test]
    fn rows_follow_label_order_with_averages() {
        let records = [
            rec("Proposed", "brain", 4.0, 30.0, 146_210, Some(3)),
            rec("Independent", "knee", 4.0, 27.0, 144_650, None),
            rec("Independent", "brain", 4.0, 29.0, 144_650, None),
            rec("Undersampled", "brain", 4.0, 20.0, 0, None),
            rec("Proposed", "knee", 4.0, 28.0, 146_210, Some(3)),
        ];
        let rows = build_report(&records).unwrap();
        let got: Vec<(&str, &str)> = rows.iter().map(|r| (r.model.as_str(), r.anatomy.as_str())).collect();
        assert_eq!(
            got,
            [
                ("Undersampled", "brain"),
                ("Independent", "brain"),
                ("Independent", "knee"),
                ("Independent", "Avg"),
                ("Proposed", "brain"),
                ("Proposed", "knee"),
                ("Proposed", "Avg"),
            ]
        );
        assert_eq!(rows[3].params, 289_300);
        assert_eq!(rows[3].psnr_db, 28.0);
        assert_eq!(rows[6].params, 146_210);
        let csv = render_csv(&rows).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "model,anatomy,accel,PSNR(dB),SSIM(%),params");
        assert_eq!(csv.lines().count(), 8);
        let text = render_text(&rows);
        assert!(text.starts_with("model"));
        assert!(text.contains("289300"));
    }

    #[test]
    fn distill_layers_are_told_apart_and_accels_form_blocks() {
        let records = [
            rec("Proposed", "brain", 6.0, 25.0, 1, Some(5)),
            rec("Proposed", "brain", 4.0, 30.0, 1, Some(1)),
            rec("Proposed", "brain", 4.0, 31.0, 1, Some(5)),
        ];
        let rows = build_report(&records).unwrap();
        let got: Vec<(&str, f64)> = rows.iter().map(|r| (r.model.as_str(), r.accel)).collect();
        assert_eq!(got, [("Proposed L1", 4.0), ("Proposed L5", 4.0), ("Proposed L5", 6.0)]);
        assert_eq!(render_text(&rows).lines().filter(|l| l.is_empty()).count(), 1);
    }

    #[test]
    fn duplicates_and_unlabeled_records_are_errors() {
        let a = rec("Shared", "brain", 4.0, 30.0, 1, None);
        assert!(build_report(&[a.clone(), a.clone()]).is_err());
        assert!(build_report(&[rec("", "brain", 4.0, 30.0, 1, None)]).is_err());
        assert!(build_report(&[]).is_err());
    }
}
