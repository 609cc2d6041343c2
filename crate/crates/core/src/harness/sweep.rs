//! Cross-product runs over one experiment parameter and seeds, with mean ± SE
//! aggregation.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::acquisition::AfTag;
use crate::error::{config_err, Result};
use crate::math;

use super::config::{ExperimentConfig, LambdaSettings, Method};
use super::experiment::{MetricRecord, RunReport};

#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    /// One shared λ for every acquisition function per value.
    Lambda(Vec<f64>),
    /// The full AF set, then each AF dropped in turn.
    DropAf,
    Methods(Vec<Method>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Lambda(_) => "lambda",
            SweepAxis::DropAf => "drop-af",
            SweepAxis::Methods(_) => "method",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    /// Value of the swept parameter, e.g. `0`, `inf`, `drop-novelty`.
    pub key: String,
    pub seed: u64,
    pub config: ExperimentConfig,
}

fn lambda_key(l: f64) -> String {
    if l.is_infinite() {
        "inf".to_string()
    } else {
        format!("{l}")
    }
}

/// Every (value, seed) configuration, values outermost.
pub fn expand(template: &ExperimentConfig, axis: &SweepAxis, seeds: &[u64]) -> Result<Vec<SweepCell>> {
    if seeds.is_empty() {
        return Err(config_err!("a sweep needs at least one seed"));
    }
    let variants: Vec<(String, ExperimentConfig)> = match axis {
        SweepAxis::Lambda(values) => values
            .iter()
            .map(|&l| (lambda_key(l), ExperimentConfig { lambda: LambdaSettings::uniform(l), ..template.clone() }))
            .collect(),
        SweepAxis::DropAf => {
            let mut v = alloc::vec![("full".to_string(), template.clone())];
            for tag in &template.afs {
                let afs: Vec<AfTag> = template.afs.iter().copied().filter(|t| t != tag).collect();
                v.push((format!("drop-{}", tag.name()), ExperimentConfig { afs, ..template.clone() }));
            }
            v
        }
        SweepAxis::Methods(methods) => methods.iter().map(|&m| (m.name().to_string(), ExperimentConfig { method: m, ..template.clone() })).collect(),
    };
    let mut cells = Vec::with_capacity(variants.len() * seeds.len());
    for (key, config) in variants {
        for &seed in seeds {
            cells.push(SweepCell { key: key.clone(), seed, config: ExperimentConfig { seed, ..config.clone() } });
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub key: String,
    pub seed: u64,
    /// The report, or the error text of a failed run.
    pub result: core::result::Result<RunReport, String>,
}

/// Runs every cell in order; a failing cell is recorded and the sweep continues.
pub fn run_cells(cells: &[SweepCell], mut runner: impl FnMut(&SweepCell) -> Result<RunReport>) -> Vec<CellOutcome> {
    cells
        .iter()
        .map(|c| CellOutcome { key: c.key.clone(), seed: c.seed, result: runner(c).map_err(|e| e.to_string()) })
        .collect()
}

/// Sample mean and standard error `s / √n`; the error is 0 for one value.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, math::sqrt(var / n as f64))
}

/// Named metric accessors for tables.
pub const METRICS: [(&str, fn(&MetricRecord) -> Option<f64>); 10] = [
    ("success_rate", |r| r.success_rate),
    ("crash_rate", |r| r.crash_rate),
    ("fpr", |r| r.fpr),
    ("tnr", |r| r.tnr),
    ("grid_accuracy", |r| r.grid_accuracy),
    ("accuracy", |r| r.accuracy),
    ("log_likelihood", |r| r.log_likelihood),
    ("true_reward", |r| r.true_reward),
    ("train_success_rate", |r| r.train_success_rate),
    ("train_steps", |r| r.train_steps),
];

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub key: String,
    pub metric: &'static str,
    pub labels: usize,
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

/// Aggregates every metric at every label count measured by all successful seeds of a key.
pub fn summarize(outcomes: &[CellOutcome]) -> Vec<SummaryRow> {
    let mut keys: Vec<&str> = Vec::new();
    for o in outcomes {
        if !keys.contains(&o.key.as_str()) {
            keys.push(&o.key);
        }
    }
    let mut rows = Vec::new();
    for key in keys {
        let reports: Vec<&RunReport> = outcomes.iter().filter(|o| o.key == key).filter_map(|o| o.result.as_ref().ok()).collect();
        let Some(first) = reports.first() else { continue };
        for rec in &first.curve {
            for (name, get) in METRICS {
                let vals: Vec<f64> = reports
                    .iter()
                    .filter_map(|r| r.curve.iter().find(|x| x.labels == rec.labels).and_then(get))
                    .collect();
                if vals.len() == reports.len() {
                    let (mean, se) = mean_se(&vals);
                    rows.push(SummaryRow { key: key.to_string(), metric: name, labels: rec.labels, mean, se, n: vals.len() });
                }
            }
        }
    }
    rows
}
