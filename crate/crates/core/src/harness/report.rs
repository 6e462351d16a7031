use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MuseError, Result};
use crate::multipole::MuseConfig;
use crate::numerics::DType;

use super::workload::WorkloadSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

/// One timed run. CSV output has one of these per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub label: String,
    pub implementation: String,
    pub ablation: String,
    pub c: usize,
    pub iters: usize,
    pub cap_ratio: f64,
    pub seed: u64,
    pub batch: usize,
    pub n: usize,
    pub rel_sq_error: f64,
    pub wall_time_ms: f64,
    pub tokens_processed: usize,
    pub reference_hash: String,
}

/// Mean / standard deviation over the runs sharing a label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub label: String,
    pub runs: usize,
    pub mean_rel_sq_error: f64,
    pub std_rel_sq_error: f64,
    pub mean_wall_time_ms: f64,
    pub std_wall_time_ms: f64,
}

/// Per-seed outcome of an ablation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingVerdict {
    pub seed: u64,
    pub full: f64,
    pub no_dipole: f64,
    pub single_query_cluster: f64,
    pub no_monopole: f64,
    /// `full < no_dipole < single_query_cluster < no_monopole`.
    pub ordered: bool,
    pub dipole_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub dtype: DType,
    pub workload: WorkloadSpec,
    pub grid: Vec<MuseConfig>,
    pub notes: Vec<String>,
    pub rows: Vec<RunRow>,
    pub aggregates: Vec<AggregateRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub verdicts: Vec<OrderingVerdict>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl ExperimentReport {
    pub fn new(experiment: &str, dtype: DType, workload: WorkloadSpec, grid: Vec<MuseConfig>) -> Self {
        Self {
            experiment: experiment.to_string(),
            dtype,
            workload,
            grid,
            notes: Vec::new(),
            rows: Vec::new(),
            aggregates: Vec::new(),
            verdicts: Vec::new(),
        }
    }

    /// Recomputes [`Self::aggregates`], one per label in first-seen order.
    pub fn aggregate(&mut self) {
        let mut order: Vec<&str> = Vec::new();
        let mut groups: BTreeMap<&str, Vec<&RunRow>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry(&r.label).or_insert_with(|| {
                order.push(&r.label);
                Vec::new()
            });
            groups.get_mut(r.label.as_str()).expect("inserted").push(r);
        }
        self.aggregates = order
            .iter()
            .map(|label| {
                let rows = &groups[label];
                let errs: Vec<f64> = rows.iter().map(|r| r.rel_sq_error).collect();
                let times: Vec<f64> = rows.iter().map(|r| r.wall_time_ms).collect();
                let (me, se) = mean_std(&errs);
                let (mt, st) = mean_std(&times);
                AggregateRow {
                    label: label.to_string(),
                    runs: rows.len(),
                    mean_rel_sq_error: me,
                    std_rel_sq_error: se,
                    mean_wall_time_ms: mt,
                    std_wall_time_ms: st,
                }
            })
            .collect();
    }

    pub fn aggregate_for(&self, label: &str) -> Option<&AggregateRow> {
        self.aggregates.iter().find(|a| a.label == label)
    }

    /// Rejects NaN or infinite metrics.
    pub fn check(&self) -> Result<()> {
        for r in &self.rows {
            if !r.rel_sq_error.is_finite() || !r.wall_time_ms.is_finite() {
                return Err(MuseError::NonFinite(format!("metric in run {}", r.label)));
            }
        }
        Ok(())
    }

    /// Copy with every wall time zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.rows.iter_mut().for_each(|row| row.wall_time_ms = 0.0);
        r.aggregate();
        r
    }

    pub fn to_json(&self) -> Result<String> {
        self.check()?;
        serde_json::to_string_pretty(self).map_err(|e| MuseError::Report(e.to_string()))
    }

    pub fn to_csv(&self) -> Result<String> {
        self.check()?;
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| MuseError::Report(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| MuseError::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| MuseError::Report(e.to_string()))
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        match format {
            ReportFormat::Json => self.to_json(),
            ReportFormat::Csv => self.to_csv(),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.render(format)?).map_err(|source| MuseError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}
