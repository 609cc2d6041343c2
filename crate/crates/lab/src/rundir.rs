//! Layout of a run directory.
//!
//! | file | contents |
//! |---|---|
//! | `config.toml` | the full experiment configuration |
//! | `generative.params` | generative model |
//! | `ensemble.params` | latest reward ensemble |
//! | `dataset.jsonl` | labeled transitions, demonstrations first |
//! | `labels.jsonl` | one label batch per committed round |
//! | `queries.jsonl` | synthesized trajectories with optimizer traces |
//! | `episodes.jsonl` | agent episodes from evaluations |
//! | `curve.csv` | learning curve |
//! | `report.json` | final run report |

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use querysynth_core::generative::GenerativeModel;
use querysynth_core::harness::ExperimentConfig;
use querysynth_core::reward_model::RewardEnsemble;

use crate::{config, params};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self { root })
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        if !root.join("config.toml").is_file() {
            anyhow::bail!("{} is not a run directory (no config.toml)", root.display());
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.root.join(file)
    }

    pub fn config(&self) -> PathBuf {
        self.path("config.toml")
    }
    pub fn generative(&self) -> PathBuf {
        self.path("generative.params")
    }
    pub fn ensemble(&self) -> PathBuf {
        self.path("ensemble.params")
    }
    pub fn dataset(&self) -> PathBuf {
        self.path("dataset.jsonl")
    }
    pub fn labels(&self) -> PathBuf {
        self.path("labels.jsonl")
    }
    pub fn queries(&self) -> PathBuf {
        self.path("queries.jsonl")
    }
    pub fn episodes(&self) -> PathBuf {
        self.path("episodes.jsonl")
    }
    pub fn curve(&self) -> PathBuf {
        self.path("curve.csv")
    }
    pub fn report(&self) -> PathBuf {
        self.path("report.json")
    }

    pub fn write_config(&self, c: &ExperimentConfig) -> Result<()> {
        write_atomic(&self.config(), &config::to_string(c)?)
    }

    pub fn read_config(&self) -> Result<ExperimentConfig> {
        config::load(&self.config())
    }

    pub fn write_generative(&self, m: &GenerativeModel) -> Result<()> {
        write_atomic(&self.generative(), &params::write_generative(m))
    }

    pub fn read_generative(&self) -> Result<GenerativeModel> {
        read_with(&self.generative(), params::read_generative)
    }

    pub fn write_ensemble(&self, e: &RewardEnsemble) -> Result<()> {
        write_atomic(&self.ensemble(), &params::write_ensemble(e))
    }

    pub fn read_ensemble(&self) -> Result<RewardEnsemble> {
        read_with(&self.ensemble(), params::read_ensemble)
    }
}

pub fn read_with<T>(path: &Path, parse: impl Fn(&str) -> Result<T>) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse(&text).with_context(|| format!("in {}", path.display()))
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))
}
