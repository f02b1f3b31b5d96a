//! Merges benchmark and workload JSON into flat CSV tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bench::{BenchMode, BenchResult};
use crate::error::{FwaError, Result};
use crate::flatten::{Grouping, SortPlan};
use crate::workload::{ProximityStats, Strategy, WorkloadReport};

/// What `fwa partition` writes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionOutput {
    pub scene: String,
    pub reports: Vec<WorkloadReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proximity: Option<ProximityStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sort_plan: Option<SortPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grouping: Option<Grouping>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum ReportInput {
    Bench(BenchResult),
    Partition(PartitionOutput),
    Workload(WorkloadReport),
}

impl ReportInput {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            FwaError::Schema(format!(
                "not a benchmark result, partition output or workload report: {e}"
            ))
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &str, header: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{}", self.header.join(",")).unwrap();
        for row in &self.rows {
            writeln!(out, "{}", row.join(",")).unwrap();
        }
        out
    }
}

/// Least-squares slope of `ln y` against `ln x`. Needs two distinct `x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| x <= 0.0 || y <= 0.0) {
        return None;
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

fn f(v: f64) -> String {
    format!("{v:?}")
}

/// Builds every table that has at least one row.
pub fn build_tables(inputs: &[ReportInput]) -> Vec<Table> {
    let mut benches: Vec<&BenchResult> = Vec::new();
    let mut workloads: Vec<(String, &WorkloadReport)> = Vec::new();
    for input in inputs {
        match input {
            ReportInput::Bench(b) => benches.push(b),
            ReportInput::Partition(p) => {
                workloads.extend(p.reports.iter().map(|r| (p.scene.clone(), r)))
            }
            ReportInput::Workload(w) => workloads.push((String::new(), w)),
        }
    }

    let mut tables = Vec::new();

    let mut bench = Table::new(
        "bench",
        &[
            "name",
            "mode",
            "scene",
            "n_points",
            "config_digest",
            "runs",
            "warmup",
            "mean_ms",
            "p50_ms",
            "p95_ms",
            "outliers_excluded",
        ],
    );
    for b in &benches {
        bench.rows.push(vec![
            b.name.clone(),
            b.mode.name().into(),
            b.scene.clone(),
            b.n_points.to_string(),
            b.config_digest.clone(),
            b.runs.to_string(),
            b.warmup.to_string(),
            f(b.wall_time_ms.mean),
            f(b.wall_time_ms.p50),
            f(b.wall_time_ms.p95),
            b.outliers_excluded.to_string(),
        ]);
    }

    // Equal-window (window mode) against equal-size (group mode) on the same scene.
    let mut comparison = Table::new(
        "comparison",
        &[
            "scene",
            "n_points",
            "equal_window_ms",
            "equal_size_ms",
            "speedup",
        ],
    );
    let mut pairs: BTreeMap<(String, usize), (Option<f64>, Option<f64>)> = BTreeMap::new();
    for b in &benches {
        let slot = pairs.entry((b.scene.clone(), b.n_points)).or_default();
        match b.mode {
            BenchMode::Window => slot.0 = Some(b.wall_time_ms.mean),
            BenchMode::Group => slot.1 = Some(b.wall_time_ms.mean),
            BenchMode::Global => {}
        }
    }
    for ((scene, n), (win, size)) in &pairs {
        if let (Some(win), Some(size)) = (win, size) {
            comparison.rows.push(vec![
                scene.clone(),
                n.to_string(),
                f(*win),
                f(*size),
                f(win / size),
            ]);
        }
    }

    let mut scaling = Table::new(
        "scaling",
        &["mode", "n_sizes", "min_n", "max_n", "loglog_slope"],
    );
    for mode in [BenchMode::Group, BenchMode::Global, BenchMode::Window] {
        let pts: Vec<(f64, f64)> = benches
            .iter()
            .filter(|b| b.mode == mode)
            .map(|b| (b.n_points as f64, b.wall_time_ms.mean))
            .collect();
        if let Some(slope) = loglog_slope(&pts) {
            let min = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
            let max = pts.iter().map(|p| p.0).fold(0.0, f64::max);
            scaling.rows.push(vec![
                mode.name().into(),
                pts.len().to_string(),
                (min as usize).to_string(),
                (max as usize).to_string(),
                f(slope),
            ]);
        }
    }

    let mut header = vec!["scene"];
    header.extend(WorkloadReport::CSV_HEADER.split(','));
    let mut workload = Table::new("workload", &header);
    for (scene, w) in &workloads {
        let mut row = vec![scene.clone()];
        row.extend(w.csv_row().split(',').map(str::to_string));
        workload.rows.push(row);
    }

    let mut padding = Table::new(
        "padding",
        &[
            "scene",
            "equal_window_padding_factor",
            "equal_size_padding_factor",
            "imbalance_ratio",
        ],
    );
    let mut by_scene: BTreeMap<&str, (Option<&WorkloadReport>, Option<&WorkloadReport>)> =
        BTreeMap::new();
    for (scene, w) in &workloads {
        let slot = by_scene.entry(scene.as_str()).or_default();
        match w.strategy {
            Strategy::EqualWindow => slot.0 = Some(w),
            Strategy::EqualSize => slot.1 = Some(w),
        }
    }
    for (scene, (win, size)) in by_scene {
        if let (Some(win), Some(size)) = (win, size) {
            padding.rows.push(vec![
                scene.to_string(),
                f(win.padding_factor),
                f(size.padding_factor),
                f(win.imbalance_ratio),
            ]);
        }
    }

    for t in [bench, comparison, scaling, workload, padding] {
        if !t.rows.is_empty() {
            tables.push(t);
        }
    }
    tables
}

/// Tables as CSV blocks, each preceded by a `# name` line.
pub fn render_csv(tables: &[Table]) -> String {
    let mut out = String::new();
    for (i, t) in tables.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        writeln!(out, "# {}", t.name).unwrap();
        out.push_str(&t.to_csv());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [1000.0, 2000.0, 4000.0, 8000.0]
            .iter()
            .map(|&n| (n, 3e-6 * n * n))
            .collect();
        assert!((loglog_slope(&pts).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(loglog_slope(&[(1.0, 1.0)]), None);
        assert_eq!(loglog_slope(&[(2.0, 1.0), (2.0, 3.0)]), None);
    }

    #[test]
    fn csv_blocks() {
        let mut t = Table::new("x", &["a", "b"]);
        t.rows.push(vec!["1".into(), "2".into()]);
        assert_eq!(render_csv(&[t]), "# x\na,b\n1,2\n");
    }
}
