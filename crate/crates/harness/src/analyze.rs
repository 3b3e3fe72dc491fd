//! Attention analyses over a training log: weight trend, correlation of
//! each meta-information feature with the weights, and the rank of the
//! hardest task.

use std::path::Path;

use taskattn_core::metrics::{attention_trend, pearson, rank_of_max_loss, AttentionSummary, MetricsError};
use taskattn_core::models::MetaInfo;

use crate::{HarnessError, Result};

pub const TREND_CSV: &str = "attention_trend.csv";
pub const PEARSON_CSV: &str = "pearson.csv";
pub const PEARSON_SUMMARY_CSV: &str = "pearson_summary.csv";
pub const RANK_CSV: &str = "rank.csv";

/// Log column prefix of each meta-information feature, in feature order.
const FEATURE_COLUMNS: [&str; 4] = ["grad_norm", "loss", "acc", "loss_ratio"];

#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub iterations: Vec<u64>,
    pub trend: Vec<AttentionSummary>,
    /// Per iteration, r for each feature; `None` when a column is constant.
    pub pearson: Vec<[Option<f64>; 4]>,
    pub ranks: Vec<usize>,
    /// Mean of the defined r values per feature.
    pub mean_pearson: [Option<f64>; 4],
}

struct Columns {
    iteration: usize,
    w: Vec<usize>,
    loss: Vec<usize>,
    features: [Vec<usize>; 4],
}

fn columns(header: &csv::StringRecord) -> Result<Columns> {
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| HarnessError::Log(format!("missing column {name:?}")))
    };
    let series = |prefix: &str| -> Result<Vec<usize>> {
        let mut idx = Vec::new();
        while let Some(p) = header.iter().position(|h| h == format!("{prefix}_{}", idx.len())) {
            idx.push(p);
        }
        if idx.is_empty() {
            return Err(HarnessError::Log(format!("missing columns {prefix}_*")));
        }
        Ok(idx)
    };
    let features = [
        series(FEATURE_COLUMNS[0])?,
        series(FEATURE_COLUMNS[1])?,
        series(FEATURE_COLUMNS[2])?,
        series(FEATURE_COLUMNS[3])?,
    ];
    Ok(Columns {
        iteration: find("iteration")?,
        w: series("w")?,
        loss: series("loss")?,
        features,
    })
}

fn parse(record: &csv::StringRecord, idx: &[usize], what: &str, line: u64) -> Result<Vec<f64>> {
    idx.iter()
        .map(|&i| {
            let cell = record.get(i).unwrap_or("");
            if cell.is_empty() {
                return Err(HarnessError::Log(format!(
                    "line {line}: no {what} values; the log lacks attention records"
                )));
            }
            cell.parse()
                .map_err(|_| HarnessError::Log(format!("line {line}: bad {what} value {cell:?}")))
        })
        .collect()
}

/// Analyzes one training log and writes the analysis CSVs into `out`.
pub fn run_analyze(log: &Path, out: &Path) -> Result<Analysis> {
    let mut reader = csv::Reader::from_path(log)?;
    let cols = columns(reader.headers()?)?;
    let mut iterations = Vec::new();
    let mut weights = Vec::new();
    let mut pearson_rows = Vec::new();
    let mut ranks = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let record = record?;
        let line = n as u64 + 2;
        let iteration: u64 = record
            .get(cols.iteration)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| HarnessError::Log(format!("line {line}: bad iteration")))?;
        let w = parse(&record, &cols.w, "attention", line)?;
        let loss = parse(&record, &cols.loss, "loss", line)?;
        let mut r = [None; 4];
        for (k, idx) in cols.features.iter().enumerate() {
            let x = parse(&record, idx, MetaInfo::FEATURE_NAMES[k], line)?;
            r[k] = match pearson(&x, &w) {
                Ok(v) => Some(v),
                Err(MetricsError::ZeroVariance) => None,
                Err(e) => return Err(HarnessError::Log(format!("line {line}: {e}"))),
            };
        }
        ranks.push(rank_of_max_loss(&w, &loss).map_err(|e| HarnessError::Log(format!("line {line}: {e}")))?);
        iterations.push(iteration);
        weights.push(w);
        pearson_rows.push(r);
    }
    if iterations.is_empty() {
        return Err(HarnessError::Log(format!("{} has no records", log.display())));
    }
    let trend = attention_trend(&weights);
    let mean_pearson = std::array::from_fn(|k| {
        let defined: Vec<f64> = pearson_rows.iter().filter_map(|r| r[k]).collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    });

    std::fs::create_dir_all(out)?;
    let cell = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    let mut w = csv::Writer::from_path(out.join(TREND_CSV))?;
    w.write_record(["iteration", "min", "max", "mean"])?;
    for (it, s) in iterations.iter().zip(&trend) {
        w.write_record([it.to_string(), s.min.to_string(), s.max.to_string(), s.mean.to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join(PEARSON_CSV))?;
    w.write_record(std::iter::once("iteration").chain(MetaInfo::FEATURE_NAMES))?;
    for (it, r) in iterations.iter().zip(&pearson_rows) {
        w.write_record(std::iter::once(it.to_string()).chain(r.iter().map(|&v| cell(v))))?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join(PEARSON_SUMMARY_CSV))?;
    w.write_record(["feature", "mean_r"])?;
    for (name, r) in MetaInfo::FEATURE_NAMES.iter().zip(mean_pearson) {
        w.write_record([name.to_string(), cell(r)])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join(RANK_CSV))?;
    w.write_record(["iteration", "rank"])?;
    for (it, r) in iterations.iter().zip(&ranks) {
        w.write_record([it.to_string(), r.to_string()])?;
    }
    w.flush()?;

    Ok(Analysis {
        iterations,
        trend,
        pearson: pearson_rows,
        ranks,
        mean_pearson,
    })
}
