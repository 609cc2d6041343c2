//! Declarative experiment description.

use alloc::vec;
use alloc::vec::Vec;

use crate::acquisition::{AfTag, NoveltyPairing};
use crate::env::gaussclass::ClassWorldConfig;
use crate::env::nav2d::NavWorld;
use crate::error::{config_err, Result};
use crate::generative::FitConfig;
use crate::mpc::PlannerConfig;
use crate::numerics::{Activation, AdamConfig};
use crate::reward_model::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "lowercase"))]
pub enum DomainKind {
    Nav2d,
    Gaussclass,
}

impl DomainKind {
    pub fn name(self) -> &'static str {
        match self {
            DomainKind::Nav2d => "nav2d",
            DomainKind::Gaussclass => "gaussclass",
        }
    }
}

/// How queries are produced each round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "kebab-case"))]
pub enum Method {
    /// Trajectory optimization of each acquisition function.
    Synthesis,
    /// Transitions from running the MPC agent in the training environment.
    BaselineMpcRollout,
    /// Transitions from a uniform-random policy in the training environment.
    BaselineRandomPolicy,
    /// Trajectories sampled from the generative model.
    BaselineRandomGenerative,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Synthesis, Method::BaselineMpcRollout, Method::BaselineRandomPolicy, Method::BaselineRandomGenerative];

    pub fn name(self) -> &'static str {
        match self {
            Method::Synthesis => "synthesis",
            Method::BaselineMpcRollout => "baseline-mpc-rollout",
            Method::BaselineRandomPolicy => "baseline-random-policy",
            Method::BaselineRandomGenerative => "baseline-random-generative",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "lowercase"))]
pub enum OracleKind {
    #[default]
    Simulated,
    Interactive,
}

/// Per-acquisition likelihood weights; `inf` selects the shooting solver.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, rename_all = "kebab-case"))]
pub struct LambdaSettings {
    pub uncertainty: f64,
    pub reward_max: f64,
    pub reward_min: f64,
    pub novelty: f64,
}

impl LambdaSettings {
    pub fn uniform(v: f64) -> Self {
        Self { uncertainty: v, reward_max: v, reward_min: v, novelty: v }
    }

    pub fn get(&self, tag: AfTag) -> f64 {
        match tag {
            AfTag::Uncertainty => self.uncertainty,
            AfTag::RewardMax => self.reward_max,
            AfTag::RewardMin => self.reward_min,
            AfTag::Novelty => self.novelty,
        }
    }
}

impl Default for LambdaSettings {
    fn default() -> Self {
        Self::uniform(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default))]
pub struct SynthesisSettings {
    pub iterations: usize,
    pub restarts: usize,
    pub step_size: f64,
    pub init_candidates: usize,
    /// Optional box on free latent coordinates.
    pub latent_box: Option<(f64, f64)>,
    pub pairing: NoveltyPairing,
}

impl Default for SynthesisSettings {
    fn default() -> Self {
        Self { iterations: 300, restarts: 4, step_size: 1e-2, init_candidates: 8, latent_box: None, pairing: NoveltyPairing::AllPairs }
    }
}

/// Reward-model retraining after each round.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default))]
pub struct RetrainSettings {
    /// Budget and hyperparameters of a from-scratch fit.
    pub train: TrainConfig,
    /// Continue from the previous round's ensemble with the smaller budget below.
    pub warm_start: bool,
    pub warm_epochs: usize,
    pub warm_min_steps: usize,
    pub warm_max_steps: usize,
}

impl Default for RetrainSettings {
    fn default() -> Self {
        Self { train: TrainConfig::default(), warm_start: true, warm_epochs: 4, warm_min_steps: 100, warm_max_steps: 400 }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default))]
pub struct EvalSettings {
    /// Offline metrics every this many rounds, plus at the start and the end.
    pub every_rounds: usize,
    /// Test-split episodes per episode evaluation.
    pub episodes: usize,
    /// Train-split episodes per episode evaluation.
    pub train_episodes: usize,
    /// Also run episodes whenever the label count crosses a multiple of this.
    pub episode_every_labels: Option<usize>,
    /// Planner used by evaluation episodes.
    pub planner: PlannerConfig,
    /// Offline-set episode counts.
    pub expert_episodes: usize,
    pub random_episodes: usize,
    pub random_episode_len: usize,
    pub grid_resolution: usize,
    /// gaussclass: held-out test-split samples.
    pub test_samples: usize,
    /// Demonstrator episodes used to estimate its mean episode length.
    pub demo_reference_episodes: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            every_rounds: 5,
            episodes: 20,
            train_episodes: 1,
            episode_every_labels: None,
            // replanning every step changes little at this speed and costs 5x
            planner: PlannerConfig { replan_interval: 5, ..PlannerConfig::default() },
            expert_episodes: 100,
            random_episodes: 100,
            random_episode_len: 200,
            grid_resolution: 101,
            test_samples: 2000,
            demo_reference_episodes: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default))]
pub struct GenerativeSettings {
    pub rollouts: usize,
    pub rollout_horizon: usize,
    pub fit: FitConfig,
}

impl Default for GenerativeSettings {
    fn default() -> Self {
        Self { rollouts: 5000, rollout_horizon: 0, fit: FitConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default))]
pub struct ExperimentConfig {
    pub domain: DomainKind,
    pub method: Method,
    pub afs: Vec<AfTag>,
    pub lambda: LambdaSettings,
    /// Total query labels, excluding demonstrations.
    pub budget: usize,
    /// Labels per round for the baselines; synthesis rounds hold one trajectory per AF.
    pub round_size: usize,
    /// Query trajectory length `T`.
    pub horizon: usize,
    pub demos: usize,
    pub seed: u64,
    pub oracle: OracleKind,
    pub nav: NavWorld,
    pub gaussclass: ClassWorldConfig,
    pub knn_k: usize,
    pub knn_pool: usize,
    pub planner: PlannerConfig,
    pub synthesis: SynthesisSettings,
    pub retrain: RetrainSettings,
    pub eval: EvalSettings,
    pub generative: GenerativeSettings,
    /// Demonstrator heading noise in radians.
    pub demo_heading_noise: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::nav(Method::Synthesis)
    }
}

impl ExperimentConfig {
    /// 2-D navigation defaults.
    pub fn nav(method: Method) -> Self {
        Self {
            domain: DomainKind::Nav2d,
            method,
            afs: AfTag::ALL.to_vec(),
            lambda: LambdaSettings::uniform(0.0),
            budget: 1000,
            round_size: 4,
            horizon: 1,
            demos: 2,
            seed: 0,
            oracle: OracleKind::Simulated,
            nav: NavWorld::default(),
            gaussclass: ClassWorldConfig::default(),
            knn_k: 5,
            knn_pool: 5000,
            planner: PlannerConfig::default(),
            synthesis: SynthesisSettings { latent_box: Some((0.0, 1.0)), ..Default::default() },
            retrain: RetrainSettings::default(),
            eval: EvalSettings::default(),
            generative: GenerativeSettings { rollouts: 100, rollout_horizon: 100, fit: FitConfig::default() },
            demo_heading_noise: 1.0,
        }
    }

    /// Classification-domain defaults.
    pub fn gaussclass(method: Method) -> Self {
        let train = TrainConfig {
            hidden: vec![256, 256],
            activation: Activation::Tanh,
            epochs: 100,
            min_steps: 300,
            max_steps: 1500,
            adam: AdamConfig::network().with_step_size(3e-3),
            ..TrainConfig::default()
        };
        Self {
            domain: DomainKind::Gaussclass,
            method,
            afs: vec![AfTag::Uncertainty, AfTag::Novelty],
            lambda: LambdaSettings { uncertainty: 0.1, novelty: 0.01, reward_max: 0.0, reward_min: 0.0 },
            budget: 500,
            round_size: 2,
            horizon: 0,
            demos: 10,
            synthesis: SynthesisSettings { iterations: 100, restarts: 2, latent_box: Some((-3.0, 3.0)), ..Default::default() },
            retrain: RetrainSettings { train, warm_start: true, warm_epochs: 1, warm_min_steps: 30, warm_max_steps: 60 },
            generative: GenerativeSettings { rollouts: 5000, rollout_horizon: 0, fit: FitConfig::default() },
            ..Self::nav(method)
        }
    }

    pub fn for_domain(domain: DomainKind, method: Method) -> Self {
        match domain {
            DomainKind::Nav2d => Self::nav(method),
            DomainKind::Gaussclass => Self::gaussclass(method),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.method == Method::Synthesis && self.afs.is_empty() {
            return Err(config_err!("afs must be nonempty for the synthesis method"));
        }
        if self.round_size == 0 {
            return Err(config_err!("round_size must be positive"));
        }
        if self.retrain.train.members < 2 {
            return Err(config_err!("the ensemble needs at least 2 members"));
        }
        if self.eval.every_rounds == 0 {
            return Err(config_err!("eval.every_rounds must be positive"));
        }
        for tag in &self.afs {
            let l = self.lambda.get(*tag);
            if !(l >= 0.0) {
                return Err(config_err!("λ for {} must be nonnegative or inf, got {l}", tag.name()));
            }
        }
        match self.domain {
            DomainKind::Nav2d => {
                self.nav.validate()?;
                if self.horizon == 0 {
                    return Err(config_err!("nav queries need horizon ≥ 1"));
                }
                self.planner.validate()?;
                self.eval.planner.validate()?;
            }
            DomainKind::Gaussclass => {
                if self.horizon != 0 {
                    return Err(config_err!("the classification domain is single-step; horizon must be 0"));
                }
                if let Some(t) = self.afs.iter().find(|t| matches!(t, AfTag::RewardMax | AfTag::RewardMin)) {
                    return Err(config_err!("{} has no meaning in the classification domain", t.name()));
                }
                if self.afs.iter().any(|t| self.lambda.get(*t).is_infinite()) {
                    return Err(config_err!("shooting needs dynamics; the classification domain has none"));
                }
                if self.knn_pool == 0 || self.knn_k == 0 {
                    return Err(config_err!("the kNN oracle needs a nonempty pool and k ≥ 1"));
                }
            }
        }
        Ok(())
    }
}
