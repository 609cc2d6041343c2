use std::fs::File;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use querysynth::records::{self, EpisodeRecord};
use querysynth::rundir::{read_with, RunDir};
use querysynth::service::{self, ServiceConfig};
use querysynth::{config, params, results, runner};
use querysynth_core::harness::experiment::fit_generative;
use querysynth_core::harness::sweep::{self, CellOutcome, SweepAxis};
use querysynth_core::harness::{Evaluator, Method};

#[derive(Parser)]
#[command(name = "querysynth", version, about = "Reward learning from synthesized queries: experiments and labeling service")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration sources, applied in order: domain defaults, the file, the
/// shorthand flags, then `--set` assignments.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML configuration; only changed keys are needed.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// nav2d or gaussclass.
    #[arg(long)]
    domain: Option<String>,
    /// synthesis, baseline-mpc-rollout, baseline-random-policy or baseline-random-generative.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Query labels, excluding demonstrations.
    #[arg(long)]
    budget: Option<usize>,
    /// One λ for every acquisition function; `inf` selects shooting.
    #[arg(long)]
    lambda: Option<String>,
    /// Comma-separated acquisition functions, e.g. `uncertainty,novelty`.
    #[arg(long)]
    afs: Option<String>,
    /// Any configuration key, e.g. `--set eval.episodes=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn assignments(&self) -> Vec<String> {
        let mut sets = Vec::new();
        let quoted = |k: &str, v: &str| format!("{k}=\"{v}\"");
        if let Some(d) = &self.domain {
            sets.push(quoted("domain", d));
        }
        if let Some(m) = &self.method {
            sets.push(quoted("method", m));
        }
        if let Some(s) = self.seed {
            sets.push(format!("seed={s}"));
        }
        if let Some(b) = self.budget {
            sets.push(format!("budget={b}"));
        }
        if let Some(l) = &self.lambda {
            for key in ["uncertainty", "reward-max", "reward-min", "novelty"] {
                sets.push(format!("lambda.{key}={l}"));
            }
        }
        if let Some(a) = &self.afs {
            let list = a.split(',').map(|t| format!("\"{}\"", t.trim())).collect::<Vec<_>>().join(",");
            sets.push(format!("afs=[{list}]"));
        }
        sets.extend(self.set.iter().cloned());
        sets
    }

    fn resolve(&self) -> Result<querysynth_core::harness::ExperimentConfig> {
        config::resolve(self.config.as_deref(), &self.assignments())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved configuration as TOML.
    Config {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Fit the generative model from random rollouts.
    TrainGen {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Run one experiment into a run directory.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Generative model to reuse instead of fitting one.
        #[arg(long)]
        generative: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Run a configuration over one swept parameter and several seeds.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// `lambda=0,inf`, `drop-af`, or `methods=synthesis,baseline-mpc-rollout`.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = default_threads())]
        threads: usize,
        #[arg(long)]
        generative: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Score a saved ensemble with the evaluation of its run's configuration.
    Eval {
        /// Run directory supplying the configuration and generative model.
        #[arg(long)]
        run: PathBuf,
        /// Ensemble to score; defaults to the run's final one.
        #[arg(long)]
        ensemble: Option<PathBuf>,
        /// Also run agent episodes (navigation).
        #[arg(long)]
        episodes: bool,
        /// Where to write the episodes as JSON lines.
        #[arg(long)]
        episodes_out: Option<PathBuf>,
    },
    /// Start the HTTP labeling service.
    Serve {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, env = "QUERYSYNTH_ADDR", default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Directory holding one run directory per session.
        #[arg(long, env = "QUERYSYNTH_ROOT", default_value = "sessions")]
        root: PathBuf,
        #[arg(long)]
        generative: Option<PathBuf>,
        #[arg(long, default_value_t = service::DEFAULT_HEATMAP_RESOLUTION)]
        heatmap_resolution: usize,
    },
    /// Stack the learning curves of run directories into one table.
    Export {
        /// Run directories; each is keyed by its name without a `-seedN` suffix.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Also write mean ± standard error per key.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
}

fn default_threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn parse_axis(s: &str) -> Result<SweepAxis> {
    let (name, values) = s.split_once('=').unwrap_or((s, ""));
    let list = || values.split(',').map(str::trim).filter(|v| !v.is_empty());
    Ok(match name {
        "lambda" => SweepAxis::Lambda(list().map(|v| v.parse::<f64>().map_err(|_| anyhow!("bad λ {v:?}"))).collect::<Result<_>>()?),
        "drop-af" => SweepAxis::DropAf,
        "methods" => SweepAxis::Methods(list().map(|v| Method::from_name(v).ok_or_else(|| anyhow!("unknown method {v:?}"))).collect::<Result<_>>()?),
        _ => bail!("unknown axis {name:?}; expected lambda=..., drop-af or methods=..."),
    })
}

fn print_final(report: &querysynth_core::harness::RunReport) -> Result<()> {
    if let Some(r) = report.final_record() {
        println!("{}", serde_json::to_string_pretty(r)?);
    }
    Ok(())
}

fn key_of(dir: &Path) -> String {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    match name.rsplit_once("-seed") {
        Some((k, n)) if n.chars().all(|c| c.is_ascii_digit()) && !n.is_empty() => k.to_string(),
        _ => name,
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Config { config } => print!("{}", config::to_string(&config.resolve()?)?),
        Command::TrainGen { config, out } => {
            let c = config.resolve()?;
            let (model, report) = fit_generative(&c).map_err(|e| anyhow!("{e}"))?;
            std::fs::write(&out, params::write_generative(&model)).with_context(|| format!("writing {}", out.display()))?;
            eprintln!("fit: {report:?}");
        }
        Command::Run { config, generative, out } => {
            let c = config.resolve()?;
            let model = runner::generative_for(&c, generative.as_deref())?;
            let report = runner::run_into(&RunDir::create(&out)?, &c, model)?;
            print_final(&report)?;
        }
        Command::Sweep { config, axis, seeds, threads, generative, out } => {
            let c = config.resolve()?;
            let cells = sweep::expand(&c, &parse_axis(&axis)?, &seeds).map_err(|e| anyhow!("{e}"))?;
            let model = generative.as_deref().map(|p| read_with(p, params::read_generative)).transpose()?;
            let outcomes = runner::run_sweep(&out, &cells, threads, model.as_ref())?;
            for o in &outcomes {
                if let Err(e) = &o.result {
                    eprintln!("{} seed {} failed: {e}", o.key, o.seed);
                }
            }
            eprintln!("wrote {} and {}", out.join("results.csv").display(), out.join("summary.csv").display());
        }
        Command::Eval { run, ensemble, episodes, episodes_out } => {
            let dir = RunDir::open(&run)?;
            let c = dir.read_config()?;
            let model = dir.read_generative()?;
            let ens = match ensemble {
                Some(p) => read_with(&p, params::read_ensemble)?,
                None => dir.read_ensemble()?,
            };
            let report = runner::read_report(&dir).ok();
            let labels = report.as_ref().map_or(0, |r| r.labels);
            let rounds = report.as_ref().map_or(0, |r| r.rounds);
            let ev = Evaluator::from_config(&c).map_err(|e| anyhow!("{e}"))?.evaluate(&ens, &model, labels, rounds, episodes).map_err(|e| anyhow!("{e}"))?;
            if let Some(p) = episodes_out {
                let recs: Vec<EpisodeRecord> = ev.episodes.iter().enumerate().map(|(i, e)| EpisodeRecord::new(labels, i, e)).collect();
                records::write(&p, &recs)?;
            }
            println!("{}", serde_json::to_string_pretty(&ev.record)?);
        }
        Command::Serve { config, addr, root, generative, heatmap_resolution } => {
            // validate the template once so bad flags fail before the first session
            config.resolve()?;
            let template = config::overrides(config.config.as_deref(), &config.assignments())?;
            let cfg = ServiceConfig {
                root,
                template,
                generative: generative.as_deref().map(|p| read_with(p, params::read_generative)).transpose()?,
                heatmap_resolution,
                retry_after_secs: 1,
            };
            tokio::runtime::Runtime::new()?.block_on(service::serve(cfg, addr))?;
        }
        Command::Export { runs, out, summary } => {
            let mut keyed = Vec::new();
            for r in &runs {
                let dir = RunDir::open(r)?;
                keyed.push((key_of(r), runner::read_report(&dir)?));
            }
            let rows = keyed.iter().map(|(k, r)| (k.as_str(), r));
            match out {
                Some(p) => results::write_results(File::create(&p)?, rows)?,
                None => results::write_results(std::io::stdout().lock(), rows)?,
            }
            if let Some(p) = summary {
                let outcomes: Vec<CellOutcome> = keyed.into_iter().map(|(key, r)| CellOutcome { key, seed: r.seed, result: Ok(r) }).collect();
                results::write_summary(File::create(&p)?, &sweep::summarize(&outcomes))?;
            }
        }
    }
    Ok(())
}
