//! Scores a reward ensemble against the fixed evaluation assets of a configuration.

use alloc::vec::Vec;

use crate::env::gaussclass::KnnOracle;
use crate::env::nav2d::NavWorld;
use crate::env::Split;
use crate::error::{config_err, Result};
use crate::generative::{Domain, GenerativeModel};
use crate::mpc::{self, Episode, Outcome};
use crate::reward_model::RewardModel;
use crate::rng;

use super::config::{EvalSettings, ExperimentConfig};
use super::eval::{self, LabeledStates, NavEvalSet, OfflineSetSizes};
use super::experiment::{build_domain, simulated_user, MetricRecord, TAG_EVAL_SET, TAG_TEST_EPISODE, TAG_TRAIN_EPISODE};

#[derive(Debug, Clone, PartialEq)]
enum Assets {
    Nav(NavEvalSet),
    Class(LabeledStates),
}

/// One evaluation: the metrics plus the agent episodes behind the rollout ones.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub record: MetricRecord,
    pub episodes: Vec<Episode>,
}

/// Evaluation sets are built on first use from the run seed, so every
/// evaluator of one configuration scores against identical data.
#[derive(Debug, Clone)]
pub struct Evaluator {
    settings: EvalSettings,
    seed: u64,
    domain: Domain,
    knn: Option<KnnOracle>,
    assets: Option<Assets>,
}

impl Evaluator {
    pub fn new(config: &ExperimentConfig, domain: Domain, knn: Option<KnnOracle>) -> Result<Self> {
        if matches!(domain, Domain::Class(_)) && knn.is_none() {
            return Err(config_err!("classification evaluation needs the kNN oracle"));
        }
        Ok(Self { settings: config.eval.clone(), seed: config.seed, domain, knn, assets: None })
    }

    /// Builds the domain and the simulated oracle from the configuration alone.
    pub fn from_config(config: &ExperimentConfig) -> Result<Self> {
        let domain = build_domain(config)?;
        let knn = match &domain {
            Domain::Class(world) => Some(simulated_user(config, world)?),
            Domain::Nav(_) => None,
        };
        Self::new(config, domain, knn)
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    fn assets(&mut self) -> Result<&Assets> {
        if self.assets.is_none() {
            let mut stream = rng::substream(self.seed, TAG_EVAL_SET);
            let e = &self.settings;
            let assets = match (&self.domain, &self.knn) {
                (Domain::Nav(world), _) => {
                    let sizes = OfflineSetSizes {
                        expert_episodes: e.expert_episodes,
                        random_episodes: e.random_episodes,
                        random_episode_len: e.random_episode_len,
                        grid_resolution: e.grid_resolution,
                    };
                    Assets::Nav(eval::build_nav_eval_set(world, sizes, &mut stream)?)
                }
                (Domain::Class(world), Some(knn)) => Assets::Class(eval::build_class_eval_set(world, knn, e.test_samples, &mut stream)?),
                (Domain::Class(_), None) => unreachable!("checked in new"),
            };
            self.assets = Some(assets);
        }
        Ok(self.assets.as_ref().expect("built above"))
    }

    /// Offline metrics, plus agent episodes when `episodes` is set (navigation only).
    pub fn evaluate(&mut self, model: &dyn RewardModel, generative: &GenerativeModel, labels: usize, round: usize, episodes: bool) -> Result<Evaluation> {
        let mut rec = MetricRecord { labels, round, ..Default::default() };
        match self.assets()? {
            Assets::Nav(set) => {
                let p = eval::predict(model, generative, &set.offline)?;
                rec.fpr = eval::false_positive_rate(&set.offline.classes, &p);
                rec.tnr = eval::true_negative_rate(&set.offline.classes, &p);
                let g = eval::predict(model, generative, &set.grid)?;
                rec.grid_accuracy = Some(eval::accuracy(&set.grid.classes, &g));
            }
            Assets::Class(set) => {
                let p = eval::predict(model, generative, set)?;
                rec.accuracy = Some(eval::accuracy(&set.classes, &p));
                rec.log_likelihood = Some(eval::mean_log_likelihood(model, generative, set)?);
            }
        }
        let mut eps = Vec::new();
        if episodes {
            if let Domain::Nav(world) = &self.domain {
                eps = self.episode_metrics(world, model, generative, &mut rec)?;
            }
        }
        Ok(Evaluation { record: rec, episodes: eps })
    }

    fn episode_metrics(&self, world: &NavWorld, model: &dyn RewardModel, generative: &GenerativeModel, rec: &mut MetricRecord) -> Result<Vec<Episode>> {
        let e = &self.settings;
        let mut all = Vec::with_capacity(e.episodes + e.train_episodes);
        if e.episodes > 0 {
            let mut eps = Vec::with_capacity(e.episodes);
            for i in 0..e.episodes {
                let seed = rng::derive(self.seed, &[TAG_TEST_EPISODE, i as u64]);
                eps.push(mpc::run_episode(world, &e.planner, model, generative, Split::Test, seed)?);
            }
            let (ok, crash, _) = mpc::outcome_counts(&eps);
            let n = eps.len() as f64;
            rec.success_rate = Some(ok as f64 / n);
            rec.crash_rate = Some(crash as f64 / n);
            let total: f64 = eps.iter().map(|ep| ep.trajectory.states[1..].iter().map(|s| world.true_reward(s)).sum::<f64>()).sum();
            rec.true_reward = Some(total / n);
            all.extend(eps);
        }
        if e.train_episodes > 0 {
            let mut ok = 0usize;
            let mut steps = 0usize;
            for i in 0..e.train_episodes {
                let seed = rng::derive(self.seed, &[TAG_TRAIN_EPISODE, i as u64]);
                let ep = mpc::run_episode(world, &e.planner, model, generative, Split::Train, seed)?;
                if ep.outcome == Outcome::Success {
                    ok += 1;
                    steps += ep.steps();
                }
                all.push(ep);
            }
            rec.train_success_rate = Some(ok as f64 / e.train_episodes as f64);
            rec.train_steps = (ok > 0).then(|| steps as f64 / ok as f64);
        }
        Ok(all)
    }
}
