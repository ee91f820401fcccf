//! Per-trial rows, summaries and the files they are written to.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// One CSV row. Column order is fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial: usize,
    pub seed: u64,
    pub k: usize,
    pub n: usize,
    pub max_emp_err: f64,
    pub max_stat_err: f64,
    pub gamma_max: Option<f64>,
    pub success: bool,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
}

/// Statistics derived from rows alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowStats {
    pub trials: usize,
    pub mean_max_emp_err: f64,
    pub mean_max_stat_err: f64,
    pub max_max_emp_err: f64,
    pub max_max_stat_err: f64,
    pub max_stat_err_quantiles: Quantiles,
    pub mean_gamma_max: Option<f64>,
    pub successes: usize,
    pub success_fraction: f64,
}

fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

impl RowStats {
    pub fn from_rows(rows: &[TrialRow]) -> Self {
        let count = rows.len().max(1) as f64;
        let mean = |f: fn(&TrialRow) -> f64| rows.iter().map(f).sum::<f64>() / count;
        let max = |f: fn(&TrialRow) -> f64| rows.iter().map(f).fold(0.0, f64::max);
        let mut stat: Vec<f64> = rows.iter().map(|r| r.max_stat_err).collect();
        stat.sort_by(f64::total_cmp);
        let quantiles = if stat.is_empty() {
            Quantiles { p50: 0.0, p90: 0.0, p99: 0.0 }
        } else {
            Quantiles { p50: nearest_rank(&stat, 0.5), p90: nearest_rank(&stat, 0.9), p99: nearest_rank(&stat, 0.99) }
        };
        let gammas: Vec<f64> = rows.iter().filter_map(|r| r.gamma_max).collect();
        let successes = rows.iter().filter(|r| r.success).count();
        RowStats {
            trials: rows.len(),
            mean_max_emp_err: mean(|r| r.max_emp_err),
            mean_max_stat_err: mean(|r| r.max_stat_err),
            max_max_emp_err: max(|r| r.max_emp_err),
            max_max_stat_err: max(|r| r.max_stat_err),
            max_stat_err_quantiles: quantiles,
            mean_gamma_max: (!gammas.is_empty()).then(|| gammas.iter().sum::<f64>() / gammas.len() as f64),
            successes,
            success_fraction: successes as f64 / count,
        }
    }

    /// True when every field matches `other` within `tol`.
    pub fn matches(&self, other: &RowStats, tol: f64) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= tol;
        let q = |a: &Quantiles, b: &Quantiles| close(a.p50, b.p50) && close(a.p90, b.p90) && close(a.p99, b.p99);
        self.trials == other.trials
            && self.successes == other.successes
            && close(self.mean_max_emp_err, other.mean_max_emp_err)
            && close(self.mean_max_stat_err, other.mean_max_stat_err)
            && close(self.max_max_emp_err, other.max_max_emp_err)
            && close(self.max_max_stat_err, other.max_max_stat_err)
            && q(&self.max_stat_err_quantiles, &other.max_stat_err_quantiles)
            && match (self.mean_gamma_max, other.mean_gamma_max) {
                (Some(a), Some(b)) => close(a, b),
                (None, None) => true,
                _ => false,
            }
            && close(self.success_fraction, other.success_fraction)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: String,
    pub master_seed: u64,
    #[serde(flatten)]
    pub stats: RowStats,
    pub required_fraction: Option<f64>,
    pub passed: bool,
    /// Experiment-specific values, documented per experiment.
    pub details: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedRows {
    pub label: String,
    pub rows: Vec<TrialRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<TrialRow>,
    /// Additional row tables, written as `rows-<label>.csv`.
    pub extra: Vec<NamedRows>,
    pub summary: Summary,
    pub transcript: Option<String>,
}

pub fn rows_to_csv(rows: &[TrialRow]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(["trial", "seed", "k", "n", "max_emp_err", "max_stat_err", "gamma_max", "success", "wall_ms"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn rows_from_csv(text: &str) -> Result<Vec<TrialRow>, CliError> {
    csv::Reader::from_reader(text.as_bytes()).deserialize().map(|r| r.map_err(CliError::from)).collect()
}

impl ExperimentReport {
    pub fn summary_json(&self) -> Result<String, CliError> {
        let mut s = serde_json::to_string_pretty(&self.summary)?;
        s.push('\n');
        Ok(s)
    }

    /// Writes `rows.csv`, extra tables, `summary.json` and, when present,
    /// `transcript.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut put = |name: String, body: String| -> Result<(), CliError> {
            let path = dir.join(name);
            std::fs::write(&path, body)?;
            written.push(path);
            Ok(())
        };
        put("rows.csv".into(), rows_to_csv(&self.rows)?)?;
        for table in &self.extra {
            put(format!("rows-{}.csv", table.label), rows_to_csv(&table.rows)?)?;
        }
        put("summary.json".into(), self.summary_json()?)?;
        if let Some(t) = &self.transcript {
            put("transcript.jsonl".into(), t.clone())?;
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(i: usize, stat: f64, success: bool) -> TrialRow {
        TrialRow {
            trial: i,
            seed: i as u64 * 11,
            k: 3,
            n: 4,
            max_emp_err: 0.1 * i as f64,
            max_stat_err: stat,
            gamma_max: i.is_multiple_of(2).then_some(0.5),
            success,
            wall_ms: 0,
        }
    }

    #[test]
    fn stats_from_rows() {
        let rows: Vec<TrialRow> = (0..10).map(|i| row(i, i as f64, i < 7)).collect();
        let s = RowStats::from_rows(&rows);
        assert_eq!(s.successes, 7);
        assert_eq!(s.success_fraction, 0.7);
        assert_eq!(s.max_stat_err_quantiles, Quantiles { p50: 4.0, p90: 8.0, p99: 9.0 });
        assert_eq!(s.mean_gamma_max, Some(0.5));
        assert!((s.mean_max_emp_err - 0.45).abs() < 1e-12);
    }

    #[test]
    fn csv_columns_and_round_trip() {
        let rows: Vec<TrialRow> = (0..3).map(|i| row(i, 0.25, true)).collect();
        let text = rows_to_csv(&rows).unwrap();
        assert!(text.starts_with("trial,seed,k,n,max_emp_err,max_stat_err,gamma_max,success,wall_ms\n"));
        assert!(text.lines().nth(2).unwrap().contains(",,true,"));
        assert_eq!(rows_from_csv(&text).unwrap(), rows);
        assert_eq!(rows_to_csv(&[]).unwrap().lines().count(), 1);
    }
}
