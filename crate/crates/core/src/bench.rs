//! Benchmark suites: tuned schedules against the baseline across workloads
//! and memory configurations, written out as per-series CSV files.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::AcceleratorConfig;
use crate::space::Workload;
use crate::tuner::{compare_baseline_with, BaselineComparison, CompareOptions, TunerError};

/// A workload with the identifier used in the CSV `workload` column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchWorkload {
    pub id: String,
    pub workload: Workload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSuite {
    pub name: String,
    pub workloads: Vec<BenchWorkload>,
    pub configs: Vec<(String, AcceleratorConfig)>,
    pub options: CompareOptions,
}

/// Square sizes above this are left out unless a full run is requested.
pub const DESK_MAX_SQUARE: u32 = 512;

impl BenchmarkSuite {
    /// Drops workloads whose largest dimension exceeds `max`.
    pub fn capped(mut self, max: u32) -> Self {
        self.workloads.retain(|w| w.workload.m.max(w.workload.n).max(w.workload.k) <= max);
        self
    }

    pub fn with_configs(mut self, configs: Vec<(String, AcceleratorConfig)>) -> Self {
        self.configs = configs;
        self
    }
}

/// DeepBench GEMM rows used for the skinny-workload comparison: `(id, M, N, K)`.
pub const DEEPBENCH: [(u32, u32, u32, u32); 5] =
    [(15, 64, 1, 1216), (49, 128, 1, 1024), (63, 512, 1, 512), (73, 512, 2, 512), (84, 1024, 4, 512)];

pub const SQUARE_SIZES: [u32; 7] = [16, 32, 64, 128, 256, 512, 1024];

fn default_configs() -> Vec<(String, AcceleratorConfig)> {
    vec![
        ("no L2".to_string(), AcceleratorConfig::gemmini16_nol2()),
        ("L2".to_string(), AcceleratorConfig::gemmini16_l2()),
    ]
}

/// The `square` and `deepbench` suites, each under both memory presets.
pub fn builtin_suites() -> Vec<BenchmarkSuite> {
    let square =
        SQUARE_SIZES.iter().map(|&s| BenchWorkload { id: s.to_string(), workload: Workload::square(s) }).collect();
    let deepbench = DEEPBENCH
        .iter()
        .map(|&(id, m, n, k)| BenchWorkload { id: id.to_string(), workload: Workload::new(m, n, k) })
        .collect();
    vec![
        BenchmarkSuite {
            name: "square".into(),
            workloads: square,
            configs: default_configs(),
            options: CompareOptions::default(),
        },
        BenchmarkSuite {
            name: "deepbench".into(),
            workloads: deepbench,
            configs: default_configs(),
            options: CompareOptions::default(),
        },
    ]
}

pub fn builtin_suite(name: &str) -> Option<BenchmarkSuite> {
    builtin_suites().into_iter().find(|s| s.name == name)
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("suite {0:?} has no workloads or no configurations")]
    EmptySuite(String),
    #[error("{id} under {label}")]
    Tuner {
        id: String,
        label: String,
        #[source]
        source: TunerError,
    },
    #[error("writing {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("reading report {path}: {message}")]
    BadReport { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub id: String,
    pub label: String,
    pub comparison: BaselineComparison,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub cells: Vec<CellReport>,
}

impl SuiteReport {
    pub fn baseline_wins(&self) -> impl Iterator<Item = &CellReport> {
        self.cells.iter().filter(|c| c.comparison.baseline_wins())
    }
}

/// File-name form of a configuration label: `"no L2"` becomes `no_l2`.
pub fn label_slug(label: &str) -> String {
    let mut out = String::new();
    for ch in label.chars() {
        if ch.is_ascii_alphanumeric() {
            out.push(ch.to_ascii_lowercase());
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    out.trim_matches('_').to_string()
}

pub fn format_gops(g: f64) -> String {
    format!("{g:.4}")
}

fn series_csv<'a>(cells: impl Iterator<Item = (&'a str, f64)>) -> String {
    let mut out = String::from("workload,gops\n");
    for (id, g) in cells {
        out.push_str(&format!("{id},{}\n", format_gops(g)));
    }
    out
}

fn write(path: PathBuf, text: &str) -> Result<(), BenchError> {
    fs::write(&path, text).map_err(|source| BenchError::Io { path, source })
}

/// Plain-text table, one row per cell; rows where the baseline is faster are
/// marked with `*`.
pub fn render_table(report: &SuiteReport) -> String {
    let mut out = format!("suite: {}\n", report.suite);
    out.push_str(&format!(
        "{:<10} {:<8} {:>16} {:>12} {:>12} {:>12} {:>12}\n",
        "workload", "config", "shape", "tuned_cyc", "tuned_gops", "base_cyc", "base_gops"
    ));
    for c in &report.cells {
        let cmp = &c.comparison;
        out.push_str(&format!(
            "{:<10} {:<8} {:>16} {:>12} {:>12} {:>12} {:>12}{}\n",
            c.id,
            c.label,
            cmp.workload.to_string(),
            cmp.tuned.cycles,
            format_gops(cmp.tuned.gops),
            cmp.cisc.total_cycles,
            format_gops(cmp.cisc.gops),
            if cmp.baseline_wins() { " *" } else { "" }
        ));
    }
    let wins: Vec<String> = report.baseline_wins().map(|c| format!("{} ({})", c.id, c.label)).collect();
    if wins.is_empty() {
        out.push_str("baseline faster in: none\n");
    } else {
        out.push_str(&format!("baseline faster in: {}\n", wins.join(", ")));
    }
    out
}

fn write_outputs(report: &SuiteReport, suite: &BenchmarkSuite, out_dir: &Path) -> Result<(), BenchError> {
    for (label, _) in &suite.configs {
        let slug = label_slug(label);
        let cells: Vec<&CellReport> = report.cells.iter().filter(|c| &c.label == label).collect();
        let tuned = series_csv(cells.iter().map(|c| (c.id.as_str(), c.comparison.tuned.gops)));
        let base = series_csv(cells.iter().map(|c| (c.id.as_str(), c.comparison.cisc.gops)));
        write(out_dir.join(format!("tuned_{slug}.csv")), &tuned)?;
        write(out_dir.join(format!("baseline_{slug}.csv")), &base)?;
    }
    write(out_dir.join("summary.txt"), &render_table(report))?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write(out_dir.join("report.json"), &json)
}

/// Runs every (configuration, workload) cell and writes
/// `tuned_<label>.csv`, `baseline_<label>.csv`, `summary.txt` and
/// `report.json` into `out_dir`. Cells that finished are written even when a
/// later cell fails.
pub fn run_suite(suite: &BenchmarkSuite, out_dir: &Path) -> Result<SuiteReport, BenchError> {
    if suite.workloads.is_empty() || suite.configs.is_empty() {
        return Err(BenchError::EmptySuite(suite.name.clone()));
    }
    fs::create_dir_all(out_dir).map_err(|source| BenchError::Io { path: out_dir.to_path_buf(), source })?;
    let cells: Vec<(&String, &AcceleratorConfig, &BenchWorkload)> =
        suite.configs.iter().flat_map(|(label, cfg)| suite.workloads.iter().map(move |w| (label, cfg, w))).collect();
    let results: Vec<Result<CellReport, BenchError>> = cells
        .par_iter()
        .map(|&(label, cfg, bw)| {
            compare_baseline_with(bw.workload, cfg, &suite.options)
                .map(|comparison| CellReport { id: bw.id.clone(), label: label.clone(), comparison })
                .map_err(|source| BenchError::Tuner { id: bw.id.clone(), label: label.clone(), source })
        })
        .collect();

    let mut report = SuiteReport { suite: suite.name.clone(), cells: Vec::new() };
    let mut first_err = None;
    for r in results {
        match r {
            Ok(c) => report.cells.push(c),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    write_outputs(&report, suite, out_dir)?;
    match first_err {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

pub fn load_report(dir: &Path) -> Result<SuiteReport, BenchError> {
    let path = dir.join("report.json");
    let text =
        fs::read_to_string(&path).map_err(|e| BenchError::BadReport { path: path.clone(), message: e.to_string() })?;
    serde_json::from_str(&text).map_err(|e| BenchError::BadReport { path, message: e.to_string() })
}
