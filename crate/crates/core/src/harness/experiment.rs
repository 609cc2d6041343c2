//! The query loop: propose a round of queries, collect labels, append them to
//! the dataset, retrain the ensemble, and evaluate on a schedule.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::acquisition::{Acquisition, AfContext, AfTag, NoveltySet};
use crate::env::gaussclass::{ClassWorld, KnnOracle};
use crate::env::nav2d::{NavWorld, NAV_REWARDS};
use crate::env::Split;
use crate::error::{config_err, Error, Result};
use crate::generative::{self, Domain, FitReport, GenerativeModel, Trajectory};
use crate::mpc::{self, PlanContext};
use crate::numerics::AdamConfig;
use crate::reward_model::{self, FeatureSet, Featurizer, LabeledTransition, RewardEnsemble, RewardModel, TrainMode};
use crate::rng::{self, Stream};
use crate::synthesis::{self, Bounds, QueryResult, Solver, StartPolicy, SynthesisContext, SynthesisProblem};

use super::config::{DomainKind, ExperimentConfig, Method, OracleKind};
use super::demos::{self, Demonstration};
use super::eval;
use super::evaluator::{Evaluation, Evaluator};

const TAG_FIT: u64 = 1;
const TAG_DEMOS: u64 = 2;
const TAG_ORACLE: u64 = 3;
const TAG_QUERIES: u64 = 4;
const TAG_ROLLOUT: u64 = 5;
pub(crate) const TAG_EVAL_SET: u64 = 6;
pub(crate) const TAG_TEST_EPISODE: u64 = 7;
pub(crate) const TAG_TRAIN_EPISODE: u64 = 8;
const TAG_REFERENCE: u64 = 9;
const TAG_TRAIN: u64 = 10;
const TAG_SYNTH: u64 = 11;

/// One transition awaiting a label.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Query {
    pub id: u64,
    /// Acquisition tag for synthesized queries, the method name otherwise.
    pub af: String,
    pub round: usize,
    pub trajectory: u64,
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub s_next: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisRecord {
    pub af: AfTag,
    pub trajectory: u64,
    pub result: QueryResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PendingRound {
    pub round: usize,
    pub queries: Vec<Query>,
    /// Optimizer output behind each synthesized trajectory.
    pub syntheses: Vec<SynthesisRecord>,
    trajectories: Vec<(u64, Trajectory)>,
}

impl PendingRound {
    pub fn trajectories(&self) -> &[(u64, Trajectory)] {
        &self.trajectories
    }
}

/// Real environment states visited while producing queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VisitStats {
    pub real_states: usize,
    pub unsafe_states: usize,
}

/// Metrics at one point of the learning curve; absent fields were not measured.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricRecord {
    /// Cumulative query labels, excluding demonstrations.
    pub labels: usize,
    pub round: usize,
    pub fpr: Option<f64>,
    pub tnr: Option<f64>,
    pub grid_accuracy: Option<f64>,
    pub accuracy: Option<f64>,
    pub log_likelihood: Option<f64>,
    pub success_rate: Option<f64>,
    pub crash_rate: Option<f64>,
    pub true_reward: Option<f64>,
    pub train_success_rate: Option<f64>,
    /// Mean steps of successful train-split episodes.
    pub train_steps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DemoStats {
    pub count: usize,
    pub transitions: usize,
    pub mean_length: f64,
    /// Demonstrator mean episode length over fresh reference runs.
    pub reference_mean_length: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RunReport {
    pub domain: DomainKind,
    pub method: Method,
    pub seed: u64,
    pub curve: Vec<MetricRecord>,
    pub rounds: usize,
    pub labels: usize,
    pub dataset_len: usize,
    pub visits: VisitStats,
    pub demos: DemoStats,
    pub warnings: Vec<String>,
}

impl RunReport {
    pub fn final_record(&self) -> Option<&MetricRecord> {
        self.curve.last()
    }

    /// The record measured at exactly `labels`, or the last one before it.
    pub fn record_at(&self, labels: usize) -> Option<&MetricRecord> {
        self.curve.iter().rev().find(|r| r.labels <= labels)
    }

    /// Fewest labels at which `metric` reaches `threshold`.
    pub fn labels_to_reach(&self, threshold: f64, metric: impl Fn(&MetricRecord) -> Option<f64>) -> Option<usize> {
        self.curve.iter().find(|r| metric(r).is_some_and(|v| v >= threshold)).map(|r| r.labels)
    }
}

/// Progress notifications from [`Experiment::run_observed`].
#[derive(Debug, Clone, Copy)]
pub enum RunEvent<'a> {
    /// A round was labeled and committed.
    Round { pending: &'a PendingRound, labels: &'a [(u64, usize)] },
    Evaluated(&'a Evaluation),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommitReport {
    pub round: usize,
    pub added: usize,
    pub train_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Oracle {
    Nav(NavWorld),
    Knn(KnnOracle),
}

/// A baseline's persistent episode in the training environment.
#[derive(Debug, Clone)]
struct RolloutState {
    s: [f64; 2],
    steps: usize,
    trajectory: u64,
    queue: Vec<Vec<f64>>,
    warm: Option<Vec<Vec<f64>>>,
    env: Stream,
    plan: Stream,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    config: ExperimentConfig,
    domain: Domain,
    generative: GenerativeModel,
    fit_report: Option<FitReport>,
    oracle: Oracle,
    demos: Vec<Demonstration>,
    demo_stats: DemoStats,
    dataset: Vec<LabeledTransition>,
    features: Vec<f64>,
    ensemble: RewardEnsemble,
    novelty: NoveltySet,
    round: usize,
    labels: usize,
    next_query: u64,
    next_trajectory: u64,
    pending: Option<PendingRound>,
    rollout: Option<RolloutState>,
    queries: Stream,
    visits: VisitStats,
    evaluator: Evaluator,
    curve: Vec<MetricRecord>,
    warnings: Vec<String>,
    stopped: bool,
}

/// Domain-specific world built from a configuration.
pub fn build_domain(config: &ExperimentConfig) -> Result<Domain> {
    Ok(match config.domain {
        DomainKind::Nav2d => Domain::Nav(config.nav.clone()),
        DomainKind::Gaussclass => Domain::Class(ClassWorld::new(config.gaussclass.clone())?),
    })
}

/// The kNN labeler standing in for a human on the classification domain.
pub fn simulated_user(config: &ExperimentConfig, world: &ClassWorld) -> Result<KnnOracle> {
    let mut stream = rng::substream(config.seed, TAG_ORACLE);
    KnnOracle::from_world(world, config.knn_pool, config.knn_k, &mut stream)
}

/// Fits the generative model from uniform-random rollouts (all-split for the
/// classification domain, training start for navigation).
pub fn fit_generative(config: &ExperimentConfig) -> Result<(GenerativeModel, FitReport)> {
    let domain = build_domain(config)?;
    let split = match config.domain {
        DomainKind::Nav2d => Split::Train,
        DomainKind::Gaussclass => Split::All,
    };
    let mut stream = rng::substream(config.generative.fit.seed, TAG_FIT);
    let rollouts = (0..config.generative.rollouts)
        .map(|_| generative::sample_rollout(&domain, split, config.generative.rollout_horizon, &mut stream))
        .collect::<Result<Vec<_>>>()?;
    generative::fit(&domain, &rollouts, &config.generative.fit)
}

impl Experiment {
    /// Fits the generative model, then initializes from demonstrations.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (model, report) = fit_generative(&config)?;
        let mut e = Self::with_model(config, model)?;
        e.fit_report = Some(report);
        Ok(e)
    }

    /// Initializes from demonstrations with a given generative model.
    pub fn with_model(config: ExperimentConfig, generative: GenerativeModel) -> Result<Self> {
        config.validate()?;
        let domain = build_domain(&config)?;
        let seed = config.seed;
        let mut demo_stream = rng::substream(seed, TAG_DEMOS);
        let (oracle, demos, reference) = match &domain {
            Domain::Nav(world) => {
                let demos = demos::nav_demonstrations(world, config.demos.max(1), config.demo_heading_noise, &mut demo_stream)?;
                let mut ref_stream = rng::substream(seed, TAG_REFERENCE);
                let reference = match config.eval.demo_reference_episodes {
                    0 => None,
                    n => Some(demos::demonstrator_mean_length(world, config.demo_heading_noise, n, &mut ref_stream)?),
                };
                (Oracle::Nav(world.clone()), demos, reference)
            }
            Domain::Class(world) => {
                if config.demos == 0 {
                    return Err(config_err!("at least one demonstration is required"));
                }
                let demos = demos::class_demonstrations(world, config.demos, &mut demo_stream);
                let knn = simulated_user(&config, world)?;
                (Oracle::Knn(knn), demos, None)
            }
        };
        let expected_dim = match &domain {
            Domain::Nav(_) => 2,
            Domain::Class(w) => w.obs_dim(),
        };
        if generative.state_dim() != expected_dim {
            return Err(crate::error::shape_err!("generative model state dim {} does not match the domain's {expected_dim}", generative.state_dim()));
        }

        let knn = match &oracle {
            Oracle::Knn(k) => Some(k.clone()),
            Oracle::Nav(_) => None,
        };
        let evaluator = Evaluator::new(&config, domain.clone(), knn)?;

        let featurizer = Featurizer::NextState;
        let rewards = rewards_for(&domain);
        let mut dataset = Vec::new();
        let mut novelty = NoveltySet::new(generative.latent_dim());
        let mut next_trajectory = 0u64;
        for d in &demos {
            dataset.extend(d.transitions(next_trajectory));
            let emb = d.trajectory.states.iter().map(|s| generative.encode(s)).collect::<Result<Vec<_>>>()?;
            novelty.push(&emb);
            next_trajectory += 1;
        }
        let transitions: usize = demos.iter().map(|d| d.labels.len()).sum();
        let demo_stats = DemoStats {
            count: demos.len(),
            transitions,
            mean_length: demos.iter().map(|d| d.trajectory.horizon() as f64).sum::<f64>() / demos.len() as f64,
            reference_mean_length: reference,
        };
        let mut features = Vec::new();
        for t in &dataset {
            features.extend(featurizer.features(&generative, &t.s_next)?);
        }
        let num_classes = rewards.len();
        let dim = featurizer.dim(&generative);
        let labels: Vec<usize> = dataset.iter().map(|t| t.class).collect();
        let mut train = config.retrain.train.clone();
        train.mode = TrainMode::Scratch;
        train.seed = rng::derive(seed ^ config.retrain.train.seed, &[TAG_TRAIN, 0]);
        let (ensemble, report) = reward_model::train_ensemble(FeatureSet { features: &features, labels: &labels, dim }, num_classes, rewards, featurizer, &train, None)?;
        let mut warnings = Vec::new();
        if let Some(w) = report.coverage_warning {
            warnings.push(format!("initial model: {w}"));
        }
        Ok(Self {
            queries: rng::substream(seed, TAG_QUERIES),
            config,
            domain,
            generative,
            fit_report: None,
            oracle,
            demos,
            demo_stats,
            dataset,
            features,
            ensemble,
            novelty,
            round: 0,
            labels: 0,
            next_query: 0,
            next_trajectory,
            pending: None,
            rollout: None,
            visits: VisitStats::default(),
            evaluator,
            curve: Vec::new(),
            warnings,
            stopped: false,
        })
    }

    /// Rebuilds a run by re-proposing every round and committing the recorded labels.
    pub fn replay(config: ExperimentConfig, generative: GenerativeModel, batches: &[Vec<(u64, usize)>]) -> Result<Self> {
        let mut e = Self::with_model(config, generative)?;
        for batch in batches {
            if e.propose_round()?.is_none() {
                return Err(Error::Precondition("replay has more label batches than the budget allows".into()));
            }
            e.commit_labels(batch)?;
        }
        Ok(e)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn generative(&self) -> &GenerativeModel {
        &self.generative
    }

    pub fn fit_report(&self) -> Option<&FitReport> {
        self.fit_report.as_ref()
    }

    pub fn ensemble(&self) -> &RewardEnsemble {
        &self.ensemble
    }

    pub fn dataset(&self) -> &[LabeledTransition] {
        &self.dataset
    }

    pub fn demonstrations(&self) -> &[Demonstration] {
        &self.demos
    }

    pub fn demo_stats(&self) -> &DemoStats {
        &self.demo_stats
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn pending(&self) -> Option<&PendingRound> {
        self.pending.as_ref()
    }

    pub fn visits(&self) -> VisitStats {
        self.visits
    }

    pub fn curve(&self) -> &[MetricRecord] {
        &self.curve
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn num_classes(&self) -> usize {
        self.ensemble.num_classes()
    }

    /// Stops the loop; the pending round, if any, is discarded.
    pub fn stop(&mut self) {
        self.stopped = true;
        self.pending = None;
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped
    }

    pub fn is_finished(&self) -> bool {
        self.stopped || (self.pending.is_none() && self.labels >= self.config.budget)
    }

    /// The current round's queries, generating them on first call.
    pub fn propose_round(&mut self) -> Result<Option<&PendingRound>> {
        if self.pending.is_none() {
            if self.is_finished() {
                return Ok(None);
            }
            let round = match self.config.method {
                Method::Synthesis => self.synthesis_round()?,
                Method::BaselineMpcRollout | Method::BaselineRandomPolicy => self.environment_round()?,
                Method::BaselineRandomGenerative => self.generative_round()?,
            };
            self.pending = Some(round);
        }
        Ok(self.pending.as_ref())
    }

    fn new_trajectory_id(&mut self) -> u64 {
        self.next_trajectory += 1;
        self.next_trajectory - 1
    }

    fn push_trajectory(&mut self, pending: &mut PendingRound, af: &str, id: u64, traj: Trajectory) {
        let transitions = traj.transitions();
        for t in transitions {
            pending.queries.push(Query {
                id: self.next_query,
                af: af.to_string(),
                round: pending.round,
                trajectory: id,
                s: t.state.to_vec(),
                a: t.action.to_vec(),
                s_next: t.next_state.to_vec(),
            });
            self.next_query += 1;
        }
        pending.trajectories.push((id, traj));
    }

    pub fn synthesis_problem(&self, tag: AfTag) -> SynthesisProblem {
        let s = &self.config.synthesis;
        let lambda = self.config.lambda.get(tag);
        let solver = if lambda.is_infinite() { Solver::Shooting } else { Solver::Collocation { lambda } };
        let start = if self.generative.fixed_start().is_some() { StartPolicy::Clamp } else { StartPolicy::Optimize };
        let mut p = SynthesisProblem::new(Acquisition::single(tag), solver, self.config.horizon, start);
        p.iterations = s.iterations;
        p.restarts = s.restarts;
        p.adam = AdamConfig::trajectory().with_step_size(s.step_size);
        p.init_candidates = s.init_candidates;
        p.bounds = Bounds {
            latent_box: s.latent_box,
            max_speed: match &self.domain {
                Domain::Nav(w) => Some(w.max_speed),
                Domain::Class(_) => None,
            },
        };
        p
    }

    fn synthesis_round(&mut self) -> Result<PendingRound> {
        let mut pending = PendingRound { round: self.round, queries: Vec::new(), syntheses: Vec::new(), trajectories: Vec::new() };
        let afs = self.config.afs.clone();
        for (k, tag) in afs.into_iter().enumerate() {
            let problem = self.synthesis_problem(tag);
            let ctx = SynthesisContext {
                af: AfContext { reward: &self.ensemble, generative: &self.generative, novelty: &self.novelty, pairing: self.config.synthesis.pairing },
            };
            let seed = rng::derive(self.config.seed, &[TAG_SYNTH, self.round as u64, k as u64]);
            let result = synthesis::synthesize(&problem, &ctx, seed)?;
            let id = self.new_trajectory_id();
            self.push_trajectory(&mut pending, tag.name(), id, result.trajectory.clone());
            pending.syntheses.push(SynthesisRecord { af: tag, trajectory: id, result });
        }
        Ok(pending)
    }

    /// Baselines that act in the training environment.
    fn environment_round(&mut self) -> Result<PendingRound> {
        let mut pending = PendingRound { round: self.round, queries: Vec::new(), syntheses: Vec::new(), trajectories: Vec::new() };
        let source = self.config.method.name();
        match self.domain.clone() {
            Domain::Class(world) => {
                for _ in 0..self.config.round_size {
                    let s = world.sample_initial(Split::Train, &mut self.queries);
                    self.visits.real_states += 1;
                    let id = self.new_trajectory_id();
                    self.push_trajectory(&mut pending, source, id, Trajectory::single(s.observation));
                }
            }
            Domain::Nav(world) => {
                let mut segment: Option<u64> = None;
                let mut states = Vec::new();
                let mut actions = Vec::new();
                for _ in 0..self.config.round_size {
                    let (s, a, s_next, id) = self.environment_step(&world)?;
                    self.visits.real_states += 1;
                    if world.in_trap(&s_next) {
                        self.visits.unsafe_states += 1;
                    }
                    // each maximal run of one episode becomes one query trajectory
                    if segment != Some(id) {
                        if let Some(prev) = segment {
                            self.flush_segment(&mut pending, source, prev, &mut states, &mut actions)?;
                        }
                        segment = Some(id);
                        states.push(s);
                    }
                    states.push(s_next);
                    actions.push(a);
                }
                if let Some(prev) = segment {
                    self.flush_segment(&mut pending, source, prev, &mut states, &mut actions)?;
                }
            }
        }
        Ok(pending)
    }

    fn flush_segment(&mut self, pending: &mut PendingRound, source: &str, id: u64, states: &mut Vec<Vec<f64>>, actions: &mut Vec<Vec<f64>>) -> Result<()> {
        let traj = Trajectory::new(core::mem::take(states), core::mem::take(actions))?;
        self.push_trajectory(pending, source, id, traj);
        Ok(())
    }

    /// Advances the persistent baseline episode by one step.
    fn environment_step(&mut self, world: &NavWorld) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, u64)> {
        if self.rollout.is_none() {
            let id = self.new_trajectory_id();
            let k = id;
            self.rollout = Some(RolloutState {
                s: world.initial_state(Split::Train),
                steps: 0,
                trajectory: id,
                queue: Vec::new(),
                warm: None,
                env: rng::substream(rng::derive(self.config.seed, &[TAG_ROLLOUT, k]), 0),
                plan: rng::substream(rng::derive(self.config.seed, &[TAG_ROLLOUT, k]), 1),
            });
        }
        let mpc_policy = self.config.method == Method::BaselineMpcRollout;
        let planner = &self.config.planner;
        let st = self.rollout.as_mut().expect("rollout initialized above");
        let a = if mpc_policy {
            if st.queue.is_empty() {
                let ctx = PlanContext { reward: &self.ensemble, model: &self.generative, max_speed: world.max_speed };
                let p = mpc::plan(planner, &ctx, &st.s, st.warm.as_deref(), &mut st.plan)?;
                st.queue = p.actions[..planner.replan_interval].iter().rev().cloned().collect();
                st.warm = Some(p.actions[planner.replan_interval..].to_vec());
            }
            let a = st.queue.pop().expect("queue refilled above");
            [a[0], a[1]]
        } else {
            rng::uniform_disc(&mut st.env, world.max_speed)
        };
        let a = world.clip_action(a);
        let s = st.s;
        let s_next = world.step(s, a, &mut st.env);
        st.s = s_next;
        st.steps += 1;
        let id = st.trajectory;
        if world.in_trap(&s_next) || world.in_goal(&s_next) || st.steps >= world.episode_cap {
            self.rollout = None;
        }
        Ok((s.to_vec(), a.to_vec(), s_next.to_vec(), id))
    }

    /// Random trajectories drawn from the generative model itself.
    fn generative_round(&mut self) -> Result<PendingRound> {
        let mut pending = PendingRound { round: self.round, queries: Vec::new(), syntheses: Vec::new(), trajectories: Vec::new() };
        let source = self.config.method.name();
        let mut remaining = self.config.round_size;
        while remaining > 0 {
            let traj = match &self.domain {
                Domain::Nav(world) => {
                    let horizon = self.config.horizon.min(remaining);
                    let sigma = self.generative.dynamics_sigma().unwrap_or(0.0);
                    let mut z = self.generative.sample_initial_latent(&mut self.queries);
                    let mut latents = vec![z.clone()];
                    let mut actions = Vec::with_capacity(horizon);
                    for _ in 0..horizon {
                        let a = rng::uniform_disc(&mut self.queries, world.max_speed).to_vec();
                        let mean = self.generative.dynamics_mean(&z, &a)?;
                        z = mean.iter().map(|m| m + sigma * rng::normal(&mut self.queries)).collect();
                        latents.push(z.clone());
                        actions.push(a);
                    }
                    let states = latents.iter().map(|z| self.generative.decode(z)).collect::<Result<Vec<_>>>()?;
                    Trajectory::new(states, actions)?
                }
                Domain::Class(_) => {
                    let z = self.generative.sample_initial_latent(&mut self.queries);
                    let mut t = Trajectory::single(self.generative.decode(&z)?);
                    t.latents = Some(vec![z]);
                    t
                }
            };
            remaining -= traj.horizon().max(1);
            let id = self.new_trajectory_id();
            self.push_trajectory(&mut pending, source, id, traj);
        }
        Ok(pending)
    }

    /// Simulated-user labels for the pending round.
    pub fn oracle_labels(&self) -> Result<Vec<(u64, usize)>> {
        let pending = self.pending.as_ref().ok_or_else(|| Error::Precondition("no pending round".into()))?;
        pending.queries.iter().map(|q| Ok((q.id, self.oracle_label(&q.s, &q.a, &q.s_next)?))).collect()
    }

    pub fn oracle_label(&self, s: &[f64], a: &[f64], s_next: &[f64]) -> Result<usize> {
        match &self.oracle {
            Oracle::Nav(w) => Ok(w.oracle_label(s, a, s_next).index()),
            Oracle::Knn(k) => k.label(s_next),
        }
    }

    /// Checks a label batch against the pending round without changing anything.
    pub fn validate_labels(&self, labels: &[(u64, usize)]) -> Result<()> {
        let pending = self.pending.as_ref().ok_or_else(|| Error::Precondition("no pending round".into()))?;
        let classes = self.num_classes();
        let mut seen = vec![false; pending.queries.len()];
        for &(id, class) in labels {
            let pos = pending.queries.iter().position(|q| q.id == id).ok_or_else(|| config_err!("labels: unknown query id {id}"))?;
            if seen[pos] {
                return Err(config_err!("labels: duplicate query id {id}"));
            }
            seen[pos] = true;
            if class >= classes {
                return Err(config_err!("labels.class: {class} is outside 0..{classes} for query {id}"));
            }
        }
        if let Some(pos) = seen.iter().position(|s| !s) {
            return Err(config_err!("labels: missing label for query id {}", pending.queries[pos].id));
        }
        Ok(())
    }

    /// Appends a complete label batch, retrains, and advances the round.
    /// Any invalid label rejects the whole batch.
    pub fn commit_labels(&mut self, labels: &[(u64, usize)]) -> Result<CommitReport> {
        self.validate_labels(labels)?;
        let pending = self.pending.take().expect("validated above");
        let featurizer = self.ensemble.featurizer();
        let mut staged = Vec::with_capacity(pending.queries.len() * self.ensemble.feature_dim());
        for q in &pending.queries {
            staged.extend(featurizer.features(&self.generative, &q.s_next)?);
        }
        let mut novelty = self.novelty.clone();
        for (_, traj) in &pending.trajectories {
            let emb = traj.states.iter().map(|s| self.generative.encode(s)).collect::<Result<Vec<_>>>()?;
            novelty.push(&emb);
        }
        let mut dataset = self.dataset.clone();
        for q in &pending.queries {
            let class = labels.iter().find(|(id, _)| *id == q.id).map(|(_, c)| *c).expect("validated above");
            dataset.push(LabeledTransition {
                s: q.s.clone(),
                a: q.a.clone(),
                s_next: q.s_next.clone(),
                class,
                source: q.af.clone(),
                round: pending.round + 1,
                trajectory: q.trajectory,
            });
        }
        let mut features = self.features.clone();
        features.extend(staged);
        let trained = self.retrain(&dataset, &features);
        let (ensemble, report) = match trained {
            Ok(v) => v,
            Err(e) => {
                self.pending = Some(pending);
                return Err(e);
            }
        };
        if let Some(w) = report.coverage_warning {
            let w = format!("round {}: {w}", self.round);
            self.warnings.push(w);
        }
        self.dataset = dataset;
        self.features = features;
        self.novelty = novelty;
        self.ensemble = ensemble;
        self.labels += pending.queries.len();
        self.round += 1;
        Ok(CommitReport { round: self.round, added: pending.queries.len(), train_steps: report.steps })
    }

    fn retrain(&self, dataset: &[LabeledTransition], features: &[f64]) -> Result<(RewardEnsemble, reward_model::TrainReport)> {
        let r = &self.config.retrain;
        let mut train = r.train.clone();
        train.seed = rng::derive(self.config.seed ^ r.train.seed, &[TAG_TRAIN, self.round as u64 + 1]);
        let previous = if r.warm_start {
            train.mode = TrainMode::WarmStart;
            train.epochs = r.warm_epochs;
            train.min_steps = r.warm_min_steps;
            train.max_steps = r.warm_max_steps;
            Some(&self.ensemble)
        } else {
            train.mode = TrainMode::Scratch;
            None
        };
        let labels: Vec<usize> = dataset.iter().map(|t| t.class).collect();
        let data = FeatureSet { features, labels: &labels, dim: self.ensemble.feature_dim() };
        reward_model::train_ensemble(data, self.ensemble.num_classes(), self.ensemble.rewards().to_vec(), self.ensemble.featurizer(), &train, previous)
    }

    /// Proposes, labels with the simulated user, and commits one round.
    /// Returns `false` once the budget is spent.
    pub fn step(&mut self) -> Result<bool> {
        Ok(self.step_observed()?.is_some())
    }

    /// Like [`step`](Self::step), returning the committed round and its labels.
    pub fn step_observed(&mut self) -> Result<Option<(PendingRound, Vec<(u64, usize)>)>> {
        if self.config.oracle == OracleKind::Interactive {
            return Err(Error::Precondition("interactive runs take labels from outside; use propose_round and commit_labels".into()));
        }
        let Some(pending) = self.propose_round()?.cloned() else {
            return Ok(None);
        };
        let labels = self.oracle_labels()?;
        self.commit_labels(&labels)?;
        Ok(Some((pending, labels)))
    }

    /// Offline metrics of the current ensemble, plus agent episodes when asked.
    pub fn evaluate(&mut self, episodes: bool) -> Result<Evaluation> {
        self.evaluator.evaluate(&self.ensemble, &self.generative, self.labels, self.round, episodes)
    }

    /// Evaluates and appends to the learning curve.
    pub fn record(&mut self, episodes: bool) -> Result<Evaluation> {
        let ev = self.evaluate(episodes)?;
        if let Some(last) = self.curve.last() {
            if last.labels == ev.record.labels && last.round == ev.record.round {
                self.curve.pop();
            }
        }
        self.curve.push(ev.record.clone());
        Ok(ev)
    }

    fn episodes_due(&self, before: usize) -> bool {
        match self.config.eval.episode_every_labels {
            Some(k) if k > 0 => before / k != self.labels / k,
            _ => false,
        }
    }

    /// Runs the loop to budget exhaustion with the simulated user.
    pub fn run(self) -> Result<(RunReport, Self)> {
        self.run_observed(|_, _| Ok(()))
    }

    /// [`run`](Self::run), reporting every committed round and every evaluation.
    pub fn run_observed(mut self, mut observe: impl FnMut(&Self, RunEvent<'_>) -> Result<()>) -> Result<(RunReport, Self)> {
        let every = self.config.eval.every_rounds;
        let ev = self.record(self.config.budget == 0)?;
        observe(&self, RunEvent::Evaluated(&ev))?;
        while !self.is_finished() {
            let before = self.labels;
            let Some((pending, labels)) = self.step_observed()? else { break };
            observe(&self, RunEvent::Round { pending: &pending, labels: &labels })?;
            let due = self.episodes_due(before);
            if self.is_finished() || self.round % every == 0 || due {
                let ev = self.record(self.is_finished() || due)?;
                observe(&self, RunEvent::Evaluated(&ev))?;
            }
        }
        Ok((self.report(), self))
    }

    pub fn report(&self) -> RunReport {
        RunReport {
            domain: self.config.domain,
            method: self.config.method,
            seed: self.config.seed,
            curve: self.curve.clone(),
            rounds: self.round,
            labels: self.labels,
            dataset_len: self.dataset.len(),
            visits: self.visits,
            demos: self.demo_stats.clone(),
            warnings: self.warnings.clone(),
        }
    }

    /// Heat maps of the current ensemble over the unit square (navigation).
    pub fn grid_summary(&self, resolution: usize) -> Result<eval::GridSummary> {
        if self.config.domain != DomainKind::Nav2d {
            return Err(config_err!("heat maps are defined for the navigation domain only"));
        }
        eval::grid_summary(&self.ensemble, &self.generative, resolution)
    }
}

fn rewards_for(domain: &Domain) -> Vec<f64> {
    match domain {
        Domain::Nav(_) => NAV_REWARDS.to_vec(),
        Domain::Class(w) => vec![0.0; w.num_classes()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::nav2d::NavClass;
    use crate::generative::NavModel;

    fn nav_model() -> GenerativeModel {
        GenerativeModel::Nav(NavModel { start: [0.0, 0.0], sigma: 0.001 })
    }

    /// A nav configuration small enough for unit tests.
    fn tiny_nav(method: Method) -> ExperimentConfig {
        let mut c = ExperimentConfig::nav(method);
        c.budget = 8;
        c.synthesis.iterations = 30;
        c.synthesis.restarts = 2;
        c.retrain.train.max_steps = 300;
        c.retrain.train.min_steps = 100;
        c.retrain.warm_min_steps = 20;
        c.retrain.warm_max_steps = 40;
        c.eval.episodes = 1;
        c.eval.train_episodes = 1;
        c.eval.expert_episodes = 5;
        c.eval.random_episodes = 10;
        c.eval.grid_resolution = 11;
        c.eval.demo_reference_episodes = 3;
        c.eval.planner.horizon = 60;
        c.eval.planner.iterations = 20;
        c.eval.planner.replan_interval = 5;
        c.nav.episode_cap = 80;
        c.planner = c.eval.planner.clone();
        c
    }

    #[test]
    fn budget_zero_reports_only_the_demo_model() {
        let mut c = tiny_nav(Method::Synthesis);
        c.budget = 0;
        let e = Experiment::with_model(c, nav_model()).unwrap();
        let (report, e) = e.run().unwrap();
        assert_eq!(report.curve.len(), 1);
        assert_eq!(report.labels, 0);
        assert_eq!(report.rounds, 0);
        assert!(report.curve[0].success_rate.is_some());
        assert!(e.dataset().iter().all(|t| t.source == demos::DEMO_SOURCE));
    }

    #[test]
    fn synthesis_rounds_hold_one_query_per_af() {
        let c = tiny_nav(Method::Synthesis);
        let mut e = Experiment::with_model(c, nav_model()).unwrap();
        let p = e.propose_round().unwrap().unwrap().clone();
        assert_eq!(p.queries.len(), 4);
        let afs: Vec<&str> = p.queries.iter().map(|q| q.af.as_str()).collect();
        assert_eq!(afs, ["uncertainty", "reward-max", "reward-min", "novelty"]);
        assert!(p.queries.iter().all(|q| q.s == vec![0.0, 0.0]));
        // idempotent until labels arrive
        assert_eq!(e.propose_round().unwrap().unwrap(), &p);
        let demo_len = e.dataset().len();
        let labels = e.oracle_labels().unwrap();
        e.commit_labels(&labels).unwrap();
        assert_eq!(e.round(), 1);
        assert_eq!(e.labels(), 4);
        assert_eq!(e.dataset().len(), demo_len + 4);
        assert!(e.dataset()[demo_len..].iter().all(|t| t.round == 1));
        assert_eq!(e.visits(), VisitStats::default());
    }

    #[test]
    fn label_batches_are_all_or_nothing() {
        let mut e = Experiment::with_model(tiny_nav(Method::Synthesis), nav_model()).unwrap();
        e.propose_round().unwrap();
        let good = e.oracle_labels().unwrap();
        let before = (e.dataset().len(), e.round(), e.ensemble().clone());
        let mut missing = good.clone();
        missing.pop();
        assert!(e.commit_labels(&missing).is_err());
        let mut dup = good.clone();
        dup[3] = dup[0];
        assert!(e.commit_labels(&dup).is_err());
        let mut bad_class = good.clone();
        bad_class[1].1 = 3;
        let err = e.commit_labels(&bad_class).unwrap_err();
        assert!(format!("{err}").contains("labels.class"), "{err}");
        let mut unknown = good.clone();
        unknown[0].0 = 999;
        assert!(e.commit_labels(&unknown).is_err());
        assert_eq!((e.dataset().len(), e.round(), e.ensemble().clone()), before);
        assert!(e.pending().is_some());
        e.commit_labels(&good).unwrap();
        assert_eq!(e.round(), 1);
    }

    #[test]
    fn runs_are_reproducible() {
        let run = || Experiment::with_model(tiny_nav(Method::Synthesis), nav_model()).unwrap().run().unwrap();
        let (a, ea) = run();
        let (b, eb) = run();
        assert_eq!(a, b);
        assert_eq!(ea.dataset(), eb.dataset());
        assert_eq!(ea.ensemble(), eb.ensemble());
    }

    #[test]
    fn replay_restores_state() {
        let mut e = Experiment::with_model(tiny_nav(Method::Synthesis), nav_model()).unwrap();
        let mut batches = Vec::new();
        for _ in 0..2 {
            e.propose_round().unwrap();
            let l = e.oracle_labels().unwrap();
            e.commit_labels(&l).unwrap();
            batches.push(l);
        }
        e.propose_round().unwrap();
        let mut r = Experiment::replay(tiny_nav(Method::Synthesis), nav_model(), &batches).unwrap();
        r.propose_round().unwrap();
        assert_eq!(r.dataset(), e.dataset());
        assert_eq!(r.ensemble(), e.ensemble());
        assert_eq!(r.pending(), e.pending());
    }

    #[test]
    fn environment_baselines_visit_real_states() {
        for method in [Method::BaselineRandomPolicy, Method::BaselineMpcRollout] {
            let (report, e) = Experiment::with_model(tiny_nav(method), nav_model()).unwrap().run().unwrap();
            assert_eq!(report.labels, 8);
            assert_eq!(report.visits.real_states, 8);
            let q = &e.dataset()[e.dataset().len() - 8..];
            assert!(q.iter().all(|t| t.source == method.name()));
            // consecutive transitions of one episode chain together
            for w in q.windows(2) {
                if w[0].trajectory == w[1].trajectory {
                    assert_eq!(w[0].s_next, w[1].s);
                }
            }
        }
    }

    #[test]
    fn generative_baseline_starts_at_the_model_start() {
        let mut e = Experiment::with_model(tiny_nav(Method::BaselineRandomGenerative), nav_model()).unwrap();
        let p = e.propose_round().unwrap().unwrap();
        assert_eq!(p.queries.len(), 4);
        assert!(p.queries.iter().all(|q| q.s == vec![0.0, 0.0] && crate::math::norm(&q.a) <= 0.01 + 1e-12));
    }

    #[test]
    fn budget_overrun_finishes_the_round() {
        let mut c = tiny_nav(Method::Synthesis);
        c.budget = 5;
        let (report, _) = Experiment::with_model(c, nav_model()).unwrap().run().unwrap();
        assert_eq!(report.labels, 8);
        assert_eq!(report.rounds, 2);
        let xs: Vec<usize> = report.curve.iter().map(|r| r.labels).collect();
        assert!(xs.windows(2).all(|w| w[0] <= w[1]), "{xs:?}");
        assert_eq!(*xs.last().unwrap(), 8);
    }

    #[test]
    fn demos_never_include_unsafe_labels() {
        let mut c = tiny_nav(Method::Synthesis);
        c.demos = 5;
        let e = Experiment::with_model(c, nav_model()).unwrap();
        assert!(e.dataset().iter().all(|t| t.class != NavClass::Unsafe.index()));
        assert_eq!(e.demo_stats().count, 5);
    }

    #[test]
    fn interactive_mode_refuses_simulated_steps() {
        let mut c = tiny_nav(Method::Synthesis);
        c.oracle = OracleKind::Interactive;
        let mut e = Experiment::with_model(c, nav_model()).unwrap();
        assert!(matches!(e.step(), Err(Error::Precondition(_))));
        assert!(e.propose_round().unwrap().is_some());
    }
}
