//! Report serialization: the pipeline's ranking table as JSON and CSV, and
//! the rank correlation it carries.

use crate::error::{NgcError, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const REPORT_SCHEMA: &str = "1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PolicyRow {
    pub policy: String,
    pub s: f64,
    pub s_approx: f64,
    pub ngc_params: usize,
    pub replaced_dense_params: usize,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub rho: f64,
    pub iss_violations: usize,
    pub iss_max_slack: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PipelineReport {
    pub schema: String,
    pub root_accuracy: f64,
    /// Sorted by the selection criterion, best first.
    pub ranking: Vec<PolicyRow>,
    pub selected: Option<String>,
    pub selection_criterion: String,
    /// Spearman rank correlation between −S_approx and post-finetune
    /// accuracy; recorded, not thresholded.
    pub spearman_neg_s_approx_vs_accuracy: f64,
    pub config_echo: serde_json::Value,
}

/// Average ranks with ties sharing their midpoint.
fn ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; 0 for degenerate (constant) inputs.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.len() < 2 {
        return 0.0;
    }
    let ra = ranks(a);
    let rb = ranks(b);
    let mean = (a.len() + 1) as f64 / 2.0;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - mean) * (y - mean);
        da += (x - mean) * (x - mean);
        db += (y - mean) * (y - mean);
    }
    if da == 0.0 || db == 0.0 {
        0.0
    } else {
        num / (da * db).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

const CSV_HEADER: &str = "policy,s,s_approx,ngc_params,replaced_dense_params,accuracy_before,accuracy_after,rho,iss_violations,iss_max_slack";

pub fn render_csv(report: &PipelineReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &report.ranking {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.policy,
            r.s,
            r.s_approx,
            r.ngc_params,
            r.replaced_dense_params,
            r.accuracy_before,
            r.accuracy_after,
            r.rho,
            r.iss_violations,
            r.iss_max_slack
        ));
    }
    out
}

/// Parse rows back out of the CSV rendering (policies must not contain
/// commas, which the grammar guarantees... hybrid sets do use commas, so
/// the policy column is everything before the final nine fields).
pub fn parse_ranking_csv(csv: &str) -> Result<Vec<PolicyRow>> {
    let mut lines = csv.lines();
    let header = lines
        .next()
        .ok_or_else(|| NgcError::Format("empty csv".into()))?;
    if header != CSV_HEADER {
        return Err(NgcError::Format(format!("unexpected header '{header}'")));
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.rsplitn(10, ',').collect();
        if fields.len() != 10 {
            return Err(NgcError::Format(format!("bad csv row '{line}'")));
        }
        // rsplitn yields the fields in reverse order
        let f = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|_| NgcError::Format(format!("bad number '{}'", fields[i])))
        };
        let u = |i: usize| -> Result<usize> {
            fields[i]
                .parse()
                .map_err(|_| NgcError::Format(format!("bad count '{}'", fields[i])))
        };
        rows.push(PolicyRow {
            policy: fields[9].to_string(),
            s: f(8)?,
            s_approx: f(7)?,
            ngc_params: u(6)?,
            replaced_dense_params: u(5)?,
            accuracy_before: f(4)?,
            accuracy_after: f(3)?,
            rho: f(2)?,
            iss_violations: u(1)?,
            iss_max_slack: f(0)?,
        });
    }
    Ok(rows)
}

/// Write the report to `<stem>.json` or `<stem>.csv`; returns the path.
pub fn export_report(
    report: &PipelineReport,
    stem: &Path,
    format: ReportFormat,
) -> Result<std::path::PathBuf> {
    let path = match format {
        ReportFormat::Json => {
            let path = stem.with_extension("json");
            std::fs::write(&path, serde_json::to_vec_pretty(report)?)?;
            path
        }
        ReportFormat::Csv => {
            let path = stem.with_extension("csv");
            std::fs::write(&path, render_csv(report))?;
            path
        }
    };
    Ok(path)
}
