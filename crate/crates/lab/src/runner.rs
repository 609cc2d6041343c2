//! Runs experiments into run directories and fans sweeps out over threads.

use std::fs::File;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, Context, Result};
use querysynth_core::generative::GenerativeModel;
use querysynth_core::harness::experiment::fit_generative;
use querysynth_core::harness::sweep::{self, CellOutcome, SweepCell};
use querysynth_core::harness::{Experiment, ExperimentConfig, RunEvent, RunReport};

use crate::records::{self, EpisodeRecord, LabelBatch, QueryRecord};
use crate::results;
use crate::rundir::{write_atomic, RunDir};

/// Loads `path` when given, else fits a model from the configuration.
pub fn generative_for(config: &ExperimentConfig, path: Option<&Path>) -> Result<GenerativeModel> {
    match path {
        Some(p) => crate::rundir::read_with(p, crate::params::read_generative),
        None => Ok(fit_generative(config).map_err(|e| anyhow!("fitting the generative model: {e}"))?.0),
    }
}

/// Runs to budget exhaustion, persisting every round and evaluation under `dir`.
pub fn run_into(dir: &RunDir, config: &ExperimentConfig, generative: GenerativeModel) -> Result<RunReport> {
    dir.write_config(config)?;
    dir.write_generative(&generative)?;
    for f in [dir.dataset(), dir.labels(), dir.queries(), dir.episodes()] {
        File::create(&f).with_context(|| format!("creating {}", f.display()))?;
    }
    let exp = Experiment::with_model(config.clone(), generative).map_err(|e| anyhow!("{e}"))?;
    records::append(&dir.dataset(), exp.dataset())?;
    let mut written = exp.dataset().len();
    let (report, exp) = exp
        .run_observed(|exp, event| {
            let persist = || -> Result<()> {
                match event {
                    RunEvent::Round { pending, labels } => {
                        let qs: Vec<QueryRecord> = pending.syntheses.iter().map(|s| QueryRecord::new(pending.round, config.lambda.get(s.af), s)).collect();
                        records::append(&dir.queries(), &qs)?;
                        records::append(&dir.labels(), &[LabelBatch::new(pending.round, labels)])?;
                        records::append(&dir.dataset(), &exp.dataset()[written..])?;
                    }
                    RunEvent::Evaluated(ev) => {
                        let eps: Vec<EpisodeRecord> = ev.episodes.iter().enumerate().map(|(i, e)| EpisodeRecord::new(ev.record.labels, i, e)).collect();
                        records::append(&dir.episodes(), &eps)?;
                        let mut buf = Vec::new();
                        results::write_curve(&mut buf, exp.curve())?;
                        write_atomic(&dir.curve(), &String::from_utf8(buf)?)?;
                    }
                }
                Ok(())
            };
            persist().map_err(|e| querysynth_core::Error::External(format!("persisting the run: {e:#}")))?;
            written = exp.dataset().len();
            Ok(())
        })
        .map_err(|e| anyhow!("{e}"))?;
    dir.write_ensemble(exp.ensemble())?;
    write_atomic(&dir.report(), &serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Reads `report.json` from a finished run directory.
pub fn read_report(dir: &RunDir) -> Result<RunReport> {
    crate::rundir::read_with(&dir.report(), |t| Ok(serde_json::from_str(t)?))
}

pub fn cell_dir_name(cell: &SweepCell) -> String {
    format!("{}-seed{}", cell.key, cell.seed)
}

/// Runs every cell on up to `threads` workers, each into `out/<key>-seed<n>`.
/// Results do not depend on the thread count.
pub fn run_sweep(out: &Path, cells: &[SweepCell], threads: usize, generative: Option<&GenerativeModel>) -> Result<Vec<CellOutcome>> {
    std::fs::create_dir_all(out)?;
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<CellOutcome>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, cells.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cell) = cells.get(i) else { break };
                let outcome = sweep::run_cells(std::slice::from_ref(cell), |c| {
                    let result = (|| {
                        let dir = RunDir::create(out.join(cell_dir_name(c)))?;
                        let model = match generative {
                            Some(m) => m.clone(),
                            None => generative_for(&c.config, None)?,
                        };
                        run_into(&dir, &c.config, model)
                    })();
                    result.map_err(|e| querysynth_core::Error::External(format!("{e:#}")))
                });
                *slots[i].lock().expect("no panics while held") = outcome.into_iter().next();
            });
        }
    });
    let outcomes: Vec<CellOutcome> = slots.into_iter().filter_map(|s| s.into_inner().expect("no panics while held")).collect();
    let ok: Vec<(&str, &RunReport)> = outcomes.iter().filter_map(|o| o.result.as_ref().ok().map(|r| (o.key.as_str(), r))).collect();
    results::write_results(File::create(out.join("results.csv"))?, ok)?;
    results::write_summary(File::create(out.join("summary.csv"))?, &sweep::summarize(&outcomes))?;
    Ok(outcomes)
}
