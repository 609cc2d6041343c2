//! Reward as a classifier over transitions: an ensemble of softmax networks
//! whose mean class distribution is scored by fixed per-class reward constants.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, shape_err, Error, Result};
use crate::generative::GenerativeModel;
use crate::math;
use crate::numerics::{Activation, AdamConfig, AdamState, Arch, Head, Mlp};
use crate::rng;

/// How a transition becomes the network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "kebab-case"))]
pub enum Featurizer {
    /// The raw next state `s'`.
    NextState,
    /// The encoder latent of the next state (`s₀` for single-state trajectories).
    Latent,
}

impl Featurizer {
    pub fn dim(self, model: &GenerativeModel) -> usize {
        match self {
            Featurizer::NextState => model.state_dim(),
            Featurizer::Latent => model.latent_dim(),
        }
    }

    pub fn features(self, model: &GenerativeModel, next_state: &[f64]) -> Result<Vec<f64>> {
        match self {
            Featurizer::NextState => Ok(next_state.to_vec()),
            Featurizer::Latent => model.encode(next_state),
        }
    }

    /// Cotangent of `s'` given the cotangent of its features.
    pub fn features_vjp(self, model: &GenerativeModel, next_state: &[f64], d_features: &[f64]) -> Result<Vec<f64>> {
        match self {
            Featurizer::NextState => Ok(d_features.to_vec()),
            Featurizer::Latent => model.encode_vjp(next_state, d_features),
        }
    }
}

/// One labeled `(s, a, s')` with its provenance.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LabeledTransition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub s_next: Vec<f64>,
    pub class: usize,
    /// Origin tag: an acquisition tag, `demo`, or a baseline name.
    pub source: String,
    pub round: usize,
    /// Identifies the trajectory this transition came from.
    pub trajectory: u64,
}

/// Common interface of learned and scripted reward classifiers.
pub trait RewardModel {
    fn num_classes(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn rewards(&self) -> &[f64];
    fn featurizer(&self) -> Featurizer;

    /// Row-major `n × num_classes` mean class probabilities.
    fn class_probs_batch(&self, xs: &[f64], n: usize) -> Result<Vec<f64>>;

    /// Per-row disagreement; scripted models have none.
    fn disagreement_batch(&self, xs: &[f64], n: usize) -> Result<Vec<f64>> {
        check_rows(xs, n, self.feature_dim())?;
        Ok(vec![0.0; n])
    }

    /// Per-row `w_r · R̂ + w_d · disagreement` and its `n × dim` input gradient.
    fn weighted_batch(&self, xs: &[f64], n: usize, w_reward: f64, w_disagree: f64) -> Result<(Vec<f64>, Vec<f64>)>;

    fn class_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.class_probs_batch(x, 1)
    }

    fn reward(&self, x: &[f64]) -> Result<f64> {
        Ok(self.reward_batch(x, 1)?[0])
    }

    fn reward_batch(&self, xs: &[f64], n: usize) -> Result<Vec<f64>> {
        let c = self.num_classes();
        let probs = self.class_probs_batch(xs, n)?;
        Ok(probs.chunks(c).map(|p| math::dot(p, self.rewards())).collect())
    }

    fn disagreement(&self, x: &[f64]) -> Result<f64> {
        Ok(self.disagreement_batch(x, 1)?[0])
    }

    /// Argmax class; ties go to the lowest class index.
    fn classify_batch(&self, xs: &[f64], n: usize) -> Result<Vec<usize>> {
        let probs = self.class_probs_batch(xs, n)?;
        Ok(probs.chunks(self.num_classes()).map(math::argmax).collect())
    }
}

fn check_rows(xs: &[f64], n: usize, dim: usize) -> Result<()> {
    if xs.len() != n * dim {
        return Err(shape_err!("{} feature values for {n} rows of width {dim}", xs.len()));
    }
    Ok(())
}

/// `m ≥ 2` softmax classifiers with a shared architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardEnsemble {
    members: Vec<Mlp>,
    rewards: Vec<f64>,
    featurizer: Featurizer,
}

impl RewardEnsemble {
    pub fn new(members: Vec<Mlp>, rewards: Vec<f64>, featurizer: Featurizer) -> Result<Self> {
        if members.len() < 2 {
            return Err(config_err!("an ensemble needs at least 2 members, got {}", members.len()));
        }
        let arch = members[0].arch();
        if members.iter().any(|m| m.arch() != arch) {
            return Err(config_err!("ensemble members must share one architecture"));
        }
        if arch.head != Head::Softmax {
            return Err(config_err!("ensemble members need a softmax head"));
        }
        if arch.output_dim() != rewards.len() {
            return Err(config_err!("{} reward constants for {} classes", rewards.len(), arch.output_dim()));
        }
        if !math::all_finite(&rewards) {
            return Err(config_err!("reward constants must be finite"));
        }
        Ok(Self { members, rewards, featurizer })
    }

    /// `m` members with independent initializations drawn from `seed`.
    pub fn init(arch: &Arch, m: usize, rewards: Vec<f64>, featurizer: Featurizer, seed: u64) -> Result<Self> {
        let members = (0..m)
            .map(|i| Mlp::init(arch.clone(), &mut rng::substream(seed, i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(members, rewards, featurizer)
    }

    pub fn zeros(arch: &Arch, m: usize, rewards: Vec<f64>, featurizer: Featurizer) -> Result<Self> {
        let members = (0..m).map(|_| Mlp::zeros(arch.clone())).collect::<Result<Vec<_>>>()?;
        Self::new(members, rewards, featurizer)
    }

    pub fn members(&self) -> &[Mlp] {
        &self.members
    }

    pub fn arch(&self) -> &Arch {
        self.members[0].arch()
    }

    /// Member log-probabilities `m × n × C` plus the forward caches.
    fn member_passes(&self, xs: &[f64], n: usize) -> Result<(Vec<Vec<f64>>, Vec<crate::numerics::ForwardCache>)> {
        check_rows(xs, n, self.feature_dim())?;
        let c = self.num_classes();
        let mut logps = Vec::with_capacity(self.members.len());
        let mut caches = Vec::with_capacity(self.members.len());
        for m in &self.members {
            let cache = m.forward_cached(xs, n)?;
            let mut lp = vec![0.0; n * c];
            for (l, o) in cache.logits().chunks(c).zip(lp.chunks_mut(c)) {
                math::log_softmax_into(l, o);
            }
            logps.push(lp);
            caches.push(cache);
        }
        Ok((logps, caches))
    }

    /// `ln p̄` per row and class, by log-mean-exp over members.
    fn log_mean(logps: &[Vec<f64>], len: usize) -> Vec<f64> {
        let ln_m = math::ln(logps.len() as f64);
        let mut buf = vec![0.0; logps.len()];
        (0..len)
            .map(|j| {
                for (b, lp) in buf.iter_mut().zip(logps) {
                    *b = lp[j];
                }
                // exact for agreeing members, so their disagreement is exactly 0
                if buf.iter().all(|v| *v == buf[0]) {
                    return buf[0];
                }
                math::log_sum_exp(&buf) - ln_m
            })
            .collect()
    }

    fn disagreement_rows(logps: &[Vec<f64>], log_mean: &[f64], n: usize, c: usize) -> Vec<f64> {
        let inv_m = 1.0 / logps.len() as f64;
        (0..n)
            .map(|r| {
                let mut d = 0.0;
                for lp in logps {
                    for k in r * c..(r + 1) * c {
                        d += math::exp(lp[k]) * (lp[k] - log_mean[k]);
                    }
                }
                // KL is nonnegative; clamp rounding noise
                (d * inv_m).max(0.0)
            })
            .collect()
    }
}

impl RewardModel for RewardEnsemble {
    fn num_classes(&self) -> usize {
        self.rewards.len()
    }

    fn feature_dim(&self) -> usize {
        self.arch().input_dim()
    }

    fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    fn featurizer(&self) -> Featurizer {
        self.featurizer
    }

    fn class_probs_batch(&self, xs: &[f64], n: usize) -> Result<Vec<f64>> {
        check_rows(xs, n, self.feature_dim())?;
        let inv_m = 1.0 / self.members.len() as f64;
        let mut mean = vec![0.0; n * self.num_classes()];
        for m in &self.members {
            let p = m.forward_batch(xs, n)?;
            mean.iter_mut().zip(&p).for_each(|(a, b)| *a += inv_m * b);
        }
        Ok(mean)
    }

    fn disagreement_batch(&self, xs: &[f64], n: usize) -> Result<Vec<f64>> {
        let (logps, _) = self.member_passes(xs, n)?;
        let lm = Self::log_mean(&logps, n * self.num_classes());
        Ok(Self::disagreement_rows(&logps, &lm, n, self.num_classes()))
    }

    fn weighted_batch(&self, xs: &[f64], n: usize, w_reward: f64, w_disagree: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let c = self.num_classes();
        let d = self.feature_dim();
        let inv_m = 1.0 / self.members.len() as f64;
        let (logps, caches) = self.member_passes(xs, n)?;
        let lm = Self::log_mean(&logps, n * c);
        let mut values = vec![0.0; n];
        if w_reward != 0.0 {
            for r in 0..n {
                values[r] += w_reward * lm[r * c..(r + 1) * c].iter().zip(&self.rewards).map(|(l, rc)| math::exp(*l) * rc).sum::<f64>();
            }
        }
        if w_disagree != 0.0 {
            let dis = Self::disagreement_rows(&logps, &lm, n, c);
            values.iter_mut().zip(dis).for_each(|(v, x)| *v += w_disagree * x);
        }
        let mut grad = vec![0.0; n * d];
        let mut g = vec![0.0; c];
        let mut d_logits = vec![0.0; n * c];
        for (member, (lp, cache)) in self.members.iter().zip(logps.iter().zip(&caches)) {
            for r in 0..n {
                let row = r * c..(r + 1) * c;
                for (k, gk) in row.clone().zip(g.iter_mut()) {
                    *gk = inv_m * (w_reward * self.rewards[k - r * c] + w_disagree * (lp[k] - lm[k]));
                }
                let p: Vec<f64> = lp[row.clone()].iter().map(|l| math::exp(*l)).collect();
                let pg = math::dot(&p, &g);
                for ((dl, pk), gk) in d_logits[row].iter_mut().zip(&p).zip(&g) {
                    *dl = pk * (gk - pg);
                }
            }
            let dx = member.backward_from_logits(cache, &d_logits, None)?;
            grad.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
        }
        Ok((values, grad))
    }
}

/// Smooth stand-in for the navigation oracle: class logits are
/// `k(r_goal − d_goal)`, `k(r_trap − d_trap)` and `0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscOracleModel {
    pub goal_center: [f64; 2],
    pub goal_radius: f64,
    pub trap_center: [f64; 2],
    pub trap_radius: f64,
    pub sharpness: f64,
    pub rewards: Vec<f64>,
}

impl DiscOracleModel {
    pub fn from_world(world: &crate::env::nav2d::NavWorld, sharpness: f64) -> Self {
        Self {
            goal_center: world.goal_center,
            goal_radius: world.goal_radius,
            trap_center: world.trap_center,
            trap_radius: world.trap_radius,
            sharpness,
            rewards: crate::env::nav2d::NAV_REWARDS.to_vec(),
        }
    }

    /// Logits and their `3 × 2` Jacobian at `x`.
    fn logits(&self, x: &[f64]) -> ([f64; 3], [[f64; 2]; 3]) {
        let mut l = [0.0; 3];
        let mut j = [[0.0; 2]; 3];
        for (c, (center, radius)) in [(self.goal_center, self.goal_radius), (self.trap_center, self.trap_radius)].into_iter().enumerate() {
            let dx = [x[0] - center[0], x[1] - center[1]];
            let dist = math::sqrt(dx[0] * dx[0] + dx[1] * dx[1] + 1e-12);
            l[c] = self.sharpness * (radius - dist);
            j[c] = [-self.sharpness * dx[0] / dist, -self.sharpness * dx[1] / dist];
        }
        (l, j)
    }
}

impl RewardModel for DiscOracleModel {
    fn num_classes(&self) -> usize {
        3
    }

    fn feature_dim(&self) -> usize {
        2
    }

    fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    fn featurizer(&self) -> Featurizer {
        Featurizer::NextState
    }

    fn class_probs_batch(&self, xs: &[f64], n: usize) -> Result<Vec<f64>> {
        check_rows(xs, n, 2)?;
        let mut out = vec![0.0; 3 * n];
        for (x, p) in xs.chunks(2).zip(out.chunks_mut(3)) {
            math::softmax_into(&self.logits(x).0, p);
        }
        Ok(out)
    }

    fn weighted_batch(&self, xs: &[f64], n: usize, w_reward: f64, _w_disagree: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        check_rows(xs, n, 2)?;
        let mut values = vec![0.0; n];
        let mut grad = vec![0.0; 2 * n];
        let mut p = [0.0; 3];
        for r in 0..n {
            let (l, j) = self.logits(&xs[2 * r..2 * r + 2]);
            math::softmax_into(&l, &mut p);
            let mean = math::dot(&p, &self.rewards);
            values[r] = w_reward * mean;
            for c in 0..3 {
                let dl = w_reward * p[c] * (self.rewards[c] - mean);
                grad[2 * r] += dl * j[c][0];
                grad[2 * r + 1] += dl * j[c][1];
            }
        }
        Ok((values, grad))
    }
}

/// A model that predicts the same class distribution everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantModel {
    pub probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dim: usize,
}

impl RewardModel for ConstantModel {
    fn num_classes(&self) -> usize {
        self.probs.len()
    }

    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    fn featurizer(&self) -> Featurizer {
        Featurizer::NextState
    }

    fn class_probs_batch(&self, xs: &[f64], n: usize) -> Result<Vec<f64>> {
        check_rows(xs, n, self.dim)?;
        Ok(self.probs.iter().copied().cycle().take(n * self.probs.len()).collect())
    }

    fn weighted_batch(&self, xs: &[f64], n: usize, w_reward: f64, _w_disagree: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        check_rows(xs, n, self.dim)?;
        let r = w_reward * math::dot(&self.probs, &self.rewards);
        Ok((vec![r; n], vec![0.0; n * self.dim]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "kebab-case"))]
pub enum TrainMode {
    /// Fresh initialization every time.
    Scratch,
    /// Continue from the previous ensemble when one is given.
    WarmStart,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default))]
pub struct TrainConfig {
    pub members: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub batch_size: usize,
    /// Passes over the data, converted to steps and clamped to `[min_steps, max_steps]`.
    pub epochs: usize,
    pub min_steps: usize,
    pub max_steps: usize,
    pub adam: AdamConfig,
    pub mode: TrainMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            members: 4,
            hidden: vec![32, 32],
            activation: Activation::Tanh,
            batch_size: 32,
            epochs: 200,
            min_steps: 500,
            max_steps: 4000,
            adam: AdamConfig::network().with_step_size(1e-2),
            mode: TrainMode::Scratch,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub steps: usize,
    /// Set when the labels cover a single class.
    pub coverage_warning: Option<String>,
    /// Mean cross-entropy of the ensemble members on the data after training.
    pub final_loss: f64,
}

/// Training data in feature space.
#[derive(Debug, Clone, Copy)]
pub struct FeatureSet<'a> {
    pub features: &'a [f64],
    pub labels: &'a [usize],
    pub dim: usize,
}

/// Cross-entropy training of every member on the full dataset; members differ
/// only in initialization and shuffling seed.
pub fn train_ensemble(
    data: FeatureSet<'_>,
    num_classes: usize,
    rewards: Vec<f64>,
    featurizer: Featurizer,
    config: &TrainConfig,
    previous: Option<&RewardEnsemble>,
) -> Result<(RewardEnsemble, TrainReport)> {
    let n = data.labels.len();
    if n == 0 {
        return Err(Error::Precondition("reward training needs a nonempty dataset".into()));
    }
    check_rows(data.features, n, data.dim)?;
    if let Some(c) = data.labels.iter().find(|&&c| c >= num_classes) {
        return Err(config_err!("label {c} outside the {num_classes}-class set"));
    }
    config.adam.validate()?;
    let arch = Arch::with_hidden(data.dim, &config.hidden, num_classes, config.activation, Head::Softmax)?;
    let start = match (config.mode, previous) {
        (TrainMode::WarmStart, Some(prev)) if prev.arch() == &arch && prev.members.len() == config.members => {
            prev.members.clone()
        }
        _ => RewardEnsemble::init(&arch, config.members, rewards.clone(), featurizer, config.seed)?.members,
    };

    let batch = config.batch_size.clamp(1, n);
    let steps = (config.epochs * n.div_ceil(batch)).clamp(config.min_steps, config.max_steps.max(config.min_steps));
    let mut members = Vec::with_capacity(start.len());
    let mut total_loss = 0.0;
    for (i, mut net) in start.into_iter().enumerate() {
        let mut stream = rng::substream(config.seed ^ 0x5eed_0000, i as u64);
        let mut opt = AdamState::new(net.num_params(), config.adam);
        let mut order: Vec<usize> = (0..n).collect();
        let mut cursor = n;
        let mut x = vec![0.0; batch * data.dim];
        let mut y = vec![0usize; batch];
        for _ in 0..steps {
            for b in 0..batch {
                if cursor == n {
                    rng::shuffle(&mut stream, &mut order);
                    cursor = 0;
                }
                let k = order[cursor];
                cursor += 1;
                x[b * data.dim..(b + 1) * data.dim].copy_from_slice(&data.features[k * data.dim..(k + 1) * data.dim]);
                y[b] = data.labels[k];
            }
            let grad = crate::numerics::backprop(&net, &x, crate::numerics::Targets::Classes(&y), crate::numerics::Loss::CrossEntropy)?;
            opt.step(net.values_mut(), &grad)?;
        }
        total_loss += crate::numerics::loss_value(&net, data.features, crate::numerics::Targets::Classes(data.labels), crate::numerics::Loss::CrossEntropy)?;
        members.push(net);
    }

    let first = data.labels[0];
    let coverage_warning = data
        .labels
        .iter()
        .all(|&c| c == first)
        .then(|| alloc::format!("all {n} labels are class {first}; the classifier cannot separate classes"));
    let report = TrainReport { steps, coverage_warning, final_loss: total_loss / members.len() as f64 };
    Ok((RewardEnsemble::new(members, rewards, featurizer)?, report))
}
