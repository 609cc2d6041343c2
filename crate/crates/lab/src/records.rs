//! Line-delimited JSON records: the labeled dataset, synthesized queries,
//! agent episodes and label batches. One record per line, appended as the run
//! progresses, so a partially written run directory is still readable.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use querysynth_core::acquisition::AfTag;
use querysynth_core::env::Split;
use querysynth_core::generative::Trajectory;
use querysynth_core::harness::experiment::SynthesisRecord;
use querysynth_core::mpc::{Episode, Outcome};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// One synthesized query trajectory with its optimizer trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub round: usize,
    pub af: AfTag,
    pub lambda: f64,
    /// Trajectory id shared with the dataset's `trajectory` field.
    pub trajectory_id: u64,
    pub trajectory: Trajectory,
    pub objective: f64,
    pub af_value: f64,
    pub log_likelihood: Option<f64>,
    pub restart: usize,
    pub trace: Vec<f64>,
}

impl QueryRecord {
    pub fn new(round: usize, lambda: f64, s: &SynthesisRecord) -> Self {
        let r = &s.result;
        Self {
            round,
            af: s.af,
            lambda,
            trajectory_id: s.trajectory,
            trajectory: r.trajectory.clone(),
            objective: r.objective,
            af_value: r.af_value,
            log_likelihood: r.log_likelihood,
            restart: r.restart,
            trace: r.trace.clone(),
        }
    }
}

/// An agent episode from an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    /// Label count of the ensemble that drove the agent.
    pub labels: usize,
    pub index: usize,
    pub split: Split,
    pub outcome: Outcome,
    pub steps: usize,
    pub trajectory: Trajectory,
}

impl EpisodeRecord {
    pub fn new(labels: usize, index: usize, e: &Episode) -> Self {
        Self { labels, index, split: e.split, outcome: e.outcome, steps: e.steps(), trajectory: e.trajectory.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub id: u64,
    pub class: usize,
}

/// All labels of one committed round, in submission order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelBatch {
    pub round: usize,
    pub labels: Vec<Label>,
}

impl LabelBatch {
    pub fn new(round: usize, labels: &[(u64, usize)]) -> Self {
        Self { round, labels: labels.iter().map(|&(id, class)| Label { id, class }).collect() }
    }

    pub fn pairs(&self) -> Vec<(u64, usize)> {
        self.labels.iter().map(|l| (l.id, l.class)).collect()
    }
}

pub fn append<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = OpenOptions::new().create(true).append(true).open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Replaces the file's contents.
pub fn write<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    File::create(path).with_context(|| format!("creating {}", path.display()))?;
    append(path, records)
}

/// Reads every record; a missing file reads as empty.
pub fn read<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e).with_context(|| format!("opening {}", path.display())),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use querysynth_core::reward_model::LabeledTransition;

    #[test]
    fn dataset_lines_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let t = LabeledTransition { s: vec![0.0, 0.0], a: vec![0.01, 0.0], s_next: vec![0.009562671974891841, 0.1 + 0.2], class: 2, source: "uncertainty".into(), round: 3, trajectory: 7 };
        append(&p, &[t.clone()]).unwrap();
        append(&p, &[t.clone()]).unwrap();
        let back: Vec<LabeledTransition> = read(&p).unwrap();
        assert_eq!(back, vec![t.clone(), t]);
        let line = std::fs::read_to_string(&p).unwrap();
        assert!(line.lines().next().unwrap().contains("\"s_next\":[0.009562671974891841,0.30000000000000004]"));
    }

    #[test]
    fn missing_file_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let v: Vec<LabelBatch> = read(&dir.path().join("none.jsonl")).unwrap();
        assert!(v.is_empty());
    }

    #[test]
    fn bad_line_names_its_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.jsonl");
        std::fs::write(&p, "{\"round\":0,\"labels\":[]}\nnot json\n").unwrap();
        let err = format!("{:#}", read::<LabelBatch>(&p).unwrap_err());
        assert!(err.contains("b.jsonl:2"), "{err}");
    }
}
