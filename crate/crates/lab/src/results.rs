//! Comma-separated results tables.
//!
//! Learning curve (`curve.csv`), one row per evaluation:
//!
//! ```text
//! labels,round,success_rate,crash_rate,fpr,tnr,grid_accuracy,accuracy,log_likelihood,true_reward,train_success_rate,train_steps
//! ```
//!
//! Results table (`results.csv`), the curves of many runs stacked:
//!
//! ```text
//! key,seed,domain,method,labels,round,success_rate,...,train_steps
//! ```
//!
//! Summary table (`summary.csv`), mean and standard error over seeds:
//!
//! ```text
//! key,metric,labels,mean,se,n
//! ```
//!
//! Unmeasured metrics are empty cells.

use std::io::{Read, Write};

use anyhow::{anyhow, bail, Context, Result};
use querysynth_core::harness::sweep::{SummaryRow, METRICS};
use querysynth_core::harness::{MetricRecord, RunReport};

pub const CURVE_PREFIX: [&str; 2] = ["labels", "round"];
pub const RESULTS_PREFIX: [&str; 4] = ["key", "seed", "domain", "method"];

fn cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn metric_header() -> impl Iterator<Item = &'static str> {
    METRICS.iter().map(|(n, _)| *n)
}

fn metric_cells(r: &MetricRecord) -> impl Iterator<Item = String> + '_ {
    METRICS.iter().map(move |(_, get)| cell(get(r)))
}

pub fn write_curve<W: Write>(out: W, curve: &[MetricRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CURVE_PREFIX.into_iter().chain(metric_header()))?;
    for r in curve {
        w.write_record([r.labels.to_string(), r.round.to_string()].into_iter().chain(metric_cells(r)))?;
    }
    w.flush()?;
    Ok(())
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|_| anyhow!("bad number {s:?}"))
    }
}

fn setter(name: &str) -> Option<fn(&mut MetricRecord, Option<f64>)> {
    Some(match name {
        "success_rate" => |r, v| r.success_rate = v,
        "crash_rate" => |r, v| r.crash_rate = v,
        "fpr" => |r, v| r.fpr = v,
        "tnr" => |r, v| r.tnr = v,
        "grid_accuracy" => |r, v| r.grid_accuracy = v,
        "accuracy" => |r, v| r.accuracy = v,
        "log_likelihood" => |r, v| r.log_likelihood = v,
        "true_reward" => |r, v| r.true_reward = v,
        "train_success_rate" => |r, v| r.train_success_rate = v,
        "train_steps" => |r, v| r.train_steps = v,
        _ => return None,
    })
}

pub fn read_curve<R: Read>(input: R) -> Result<Vec<MetricRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let headers = rd.headers()?.clone();
    if headers.len() < 2 || &headers[0] != "labels" || &headers[1] != "round" {
        bail!("a curve table starts with labels,round");
    }
    let setters = headers.iter().skip(2).map(|h| setter(h).ok_or_else(|| anyhow!("unknown column {h:?}"))).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for (i, row) in rd.records().enumerate() {
        let row = row?;
        let line = || format!("row {}", i + 2);
        let mut r = MetricRecord {
            labels: row[0].parse().with_context(line)?,
            round: row[1].parse().with_context(line)?,
            ..Default::default()
        };
        for (set, v) in setters.iter().zip(row.iter().skip(2)) {
            set(&mut r, parse_opt(v).with_context(line)?);
        }
        out.push(r);
    }
    Ok(out)
}

/// Stacks the curves of several runs, each tagged with its key.
pub fn write_results<'a, W: Write>(out: W, runs: impl IntoIterator<Item = (&'a str, &'a RunReport)>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULTS_PREFIX.into_iter().chain(CURVE_PREFIX).chain(metric_header()))?;
    for (key, rep) in runs {
        for r in &rep.curve {
            let prefix = [key.to_string(), rep.seed.to_string(), rep.domain.name().to_string(), rep.method.name().to_string(), r.labels.to_string(), r.round.to_string()];
            w.write_record(prefix.into_iter().chain(metric_cells(r)))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary<W: Write>(out: W, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["key", "metric", "labels", "mean", "se", "n"])?;
    for r in rows {
        w.write_record([r.key.clone(), r.metric.to_string(), r.labels.to_string(), r.mean.to_string(), r.se.to_string(), r.n.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_round_trips_with_missing_cells() {
        let curve = vec![
            MetricRecord { labels: 0, round: 0, fpr: Some(0.5), tnr: Some(1.0), grid_accuracy: Some(0.75), ..Default::default() },
            MetricRecord { labels: 20, round: 5, success_rate: Some(0.95), crash_rate: Some(0.0), train_steps: Some(25.5), ..Default::default() },
        ];
        let mut buf = Vec::new();
        write_curve(&mut buf, &curve).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("labels,round,success_rate,crash_rate,fpr,tnr,"));
        assert!(text.lines().nth(1).unwrap().starts_with("0,0,,,0.5,1,"));
        assert_eq!(read_curve(buf.as_slice()).unwrap(), curve);
    }

    #[test]
    fn unknown_columns_are_rejected() {
        assert!(read_curve("labels,round,speed\n1,1,2\n".as_bytes()).is_err());
        assert!(read_curve("x,y\n".as_bytes()).is_err());
    }

    #[test]
    fn summary_has_documented_header() {
        let rows = vec![SummaryRow { key: "inf".into(), metric: "success_rate", labels: 1000, mean: 0.0, se: 0.0, n: 3 }];
        let mut buf = Vec::new();
        write_summary(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "key,metric,labels,mean,se,n\ninf,success_rate,1000,0,0,3\n");
    }
}
