//! Offline evaluation sets and the metrics computed on them.

use alloc::vec;
use alloc::vec::Vec;

use crate::env::gaussclass::{ClassWorld, KnnOracle};
use crate::env::nav2d::{NavClass, NavWorld};
use crate::env::Split;
use crate::error::Result;
use crate::generative::GenerativeModel;
use crate::math;
use crate::reward_model::RewardModel;
use crate::rng::{self, Stream};

use super::demos::{expert_action, rollout_controller};

/// Next states with their oracle classes; every metric here depends on `s'` only.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledStates {
    pub dim: usize,
    pub states: Vec<f64>,
    pub classes: Vec<usize>,
}

impl LabeledStates {
    pub fn new(dim: usize) -> Self {
        Self { dim, states: Vec::new(), classes: Vec::new() }
    }

    pub fn push(&mut self, s: &[f64], class: usize) {
        self.states.extend_from_slice(s);
        self.classes.push(class);
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        self.classes.iter().for_each(|&c| counts[c] += 1);
        counts
    }

    /// Keeps `min_c count_c` random members of every class.
    pub fn balanced(&self, num_classes: usize, stream: &mut Stream) -> Self {
        let counts = self.class_counts(num_classes);
        let keep = counts.iter().copied().filter(|&c| c > 0).min().unwrap_or(0);
        let mut out = Self::new(self.dim);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
        self.classes.iter().enumerate().for_each(|(i, &c)| by_class[c].push(i));
        let mut chosen = Vec::new();
        for mut idx in by_class {
            rng::shuffle(stream, &mut idx);
            chosen.extend(idx.into_iter().take(keep));
        }
        chosen.sort_unstable();
        for i in chosen {
            out.push(self.state(i), self.classes[i]);
        }
        out
    }
}

/// Navigation evaluation assets.
#[derive(Debug, Clone, PartialEq)]
pub struct NavEvalSet {
    /// Class-balanced pool of expert and random-policy transitions.
    pub offline: LabeledStates,
    /// Oracle-labeled uniform grid over the unit square.
    pub grid: LabeledStates,
}

/// Random starts outside the trap and goal.
fn free_start(world: &NavWorld, stream: &mut Stream) -> [f64; 2] {
    loop {
        let s = [rng::uniform(stream, 0.0, 1.0), rng::uniform(stream, 0.0, 1.0)];
        if !world.in_trap(&s) && !world.in_goal(&s) {
            return s;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OfflineSetSizes {
    pub expert_episodes: usize,
    pub random_episodes: usize,
    pub random_episode_len: usize,
    pub grid_resolution: usize,
}

impl Default for OfflineSetSizes {
    fn default() -> Self {
        Self { expert_episodes: 100, random_episodes: 100, random_episode_len: 200, grid_resolution: 101 }
    }
}

/// Expert episodes from random starts plus random-policy walks from random
/// starts, pooled and balanced; random walks continue through the goal and trap.
pub fn build_nav_eval_set(world: &NavWorld, sizes: OfflineSetSizes, stream: &mut Stream) -> Result<NavEvalSet> {
    let mut pool = LabeledStates::new(2);
    let add = |pool: &mut LabeledStates, s: &[f64]| pool.push(s, world.oracle_label(&[], &[], s).index());
    for _ in 0..sizes.expert_episodes {
        let start = free_start(world, stream);
        let t = rollout_controller(world, start, stream, |s, _| expert_action(world, s))?;
        t.states[1..].iter().for_each(|s| add(&mut pool, s));
    }
    for _ in 0..sizes.random_episodes {
        let mut s = free_start(world, stream);
        for _ in 0..sizes.random_episode_len {
            s = world.step(s, rng::uniform_disc(stream, world.max_speed), stream);
            add(&mut pool, &s);
        }
    }
    let offline = pool.balanced(NavClass::ALL.len(), stream);
    Ok(NavEvalSet { offline, grid: nav_grid(world, sizes.grid_resolution) })
}

/// `resolution²` points spanning `[0, 1]²` including the edges.
pub fn unit_grid(resolution: usize) -> Vec<[f64; 2]> {
    let step = if resolution > 1 { 1.0 / (resolution - 1) as f64 } else { 0.0 };
    (0..resolution).flat_map(|i| (0..resolution).map(move |j| [j as f64 * step, i as f64 * step])).collect()
}

pub fn nav_grid(world: &NavWorld, resolution: usize) -> LabeledStates {
    let mut grid = LabeledStates::new(2);
    for p in unit_grid(resolution) {
        grid.push(&p, world.oracle_label(&[], &[], &p).index());
    }
    grid
}

/// Test-split samples labeled by the simulated user.
pub fn build_class_eval_set(world: &ClassWorld, oracle: &KnnOracle, samples: usize, stream: &mut Stream) -> Result<LabeledStates> {
    let mut set = LabeledStates::new(world.obs_dim());
    for _ in 0..samples {
        let s = world.sample_initial(Split::Test, stream);
        let c = oracle.label(&s.observation)?;
        set.push(&s.observation, c);
    }
    Ok(set)
}

fn features(model: &dyn RewardModel, generative: &GenerativeModel, set: &LabeledStates) -> Result<Vec<f64>> {
    let feat = model.featurizer();
    let mut xs = Vec::with_capacity(set.len() * model.feature_dim());
    for i in 0..set.len() {
        xs.extend(feat.features(generative, set.state(i))?);
    }
    Ok(xs)
}

pub fn predict(model: &dyn RewardModel, generative: &GenerativeModel, set: &LabeledStates) -> Result<Vec<usize>> {
    let xs = features(model, generative, set)?;
    model.classify_batch(&xs, set.len())
}

/// False-positive rate: non-good states predicted good. `None` without non-good states.
pub fn false_positive_rate(truth: &[usize], predicted: &[usize]) -> Option<f64> {
    let good = NavClass::Good.index();
    let (hit, total) = truth.iter().zip(predicted).filter(|(t, _)| **t != good).fold((0, 0), |(h, n), (_, p)| (h + (*p == good) as usize, n + 1));
    (total > 0).then(|| hit as f64 / total as f64)
}

/// True-negative rate: unsafe states predicted unsafe. `None` without unsafe states.
pub fn true_negative_rate(truth: &[usize], predicted: &[usize]) -> Option<f64> {
    let bad = NavClass::Unsafe.index();
    let (hit, total) = truth.iter().zip(predicted).filter(|(t, _)| **t == bad).fold((0, 0), |(h, n), (_, p)| (h + (*p == bad) as usize, n + 1));
    (total > 0).then(|| hit as f64 / total as f64)
}

pub fn accuracy(truth: &[usize], predicted: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    truth.iter().zip(predicted).filter(|(t, p)| t == p).count() as f64 / truth.len() as f64
}

/// Mean log-probability the model assigns to the true classes.
pub fn mean_log_likelihood(model: &dyn RewardModel, generative: &GenerativeModel, set: &LabeledStates) -> Result<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let xs = features(model, generative, set)?;
    let probs = model.class_probs_batch(&xs, set.len())?;
    let c = model.num_classes();
    let total: f64 = set.classes.iter().enumerate().map(|(i, &k)| math::ln(probs[i * c + k].max(1e-300))).sum();
    Ok(total / set.len() as f64)
}

/// Per-cell model summary over the unit square, row-major with `y` as the row.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSummary {
    pub resolution: usize,
    /// `classes[c]` holds the probability of class `c` at every cell.
    pub classes: Vec<Vec<f64>>,
    pub reward: Vec<f64>,
    pub disagreement: Vec<f64>,
}

/// Heat maps of a navigation reward model.
pub fn grid_summary(model: &dyn RewardModel, generative: &GenerativeModel, resolution: usize) -> Result<GridSummary> {
    let feat = model.featurizer();
    let pts = unit_grid(resolution);
    let mut xs = Vec::with_capacity(pts.len() * model.feature_dim());
    for p in &pts {
        xs.extend(feat.features(generative, p)?);
    }
    let n = pts.len();
    let c = model.num_classes();
    let probs = model.class_probs_batch(&xs, n)?;
    let classes = (0..c).map(|k| (0..n).map(|i| probs[i * c + k]).collect()).collect();
    let reward = probs.chunks(c).map(|p| math::dot(p, model.rewards())).collect();
    let disagreement = model.disagreement_batch(&xs, n)?;
    Ok(GridSummary { resolution, classes, reward, disagreement })
}
