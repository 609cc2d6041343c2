//! Acquisition functions over trajectories: ensemble disagreement, predicted
//! reward (maximized or minimized), and novelty against the labeled data.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, Result};
use crate::generative::GenerativeModel;
use crate::math;
use crate::reward_model::RewardModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "kebab-case"))]
pub enum AfTag {
    Uncertainty,
    RewardMax,
    RewardMin,
    Novelty,
}

impl AfTag {
    pub const ALL: [AfTag; 4] = [AfTag::Uncertainty, AfTag::RewardMax, AfTag::RewardMin, AfTag::Novelty];

    pub fn name(self) -> &'static str {
        match self {
            AfTag::Uncertainty => "uncertainty",
            AfTag::RewardMax => "reward-max",
            AfTag::RewardMin => "reward-min",
            AfTag::Novelty => "novelty",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }
}

/// Which state pairs enter the trajectory distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "kebab-case"))]
pub enum NoveltyPairing {
    /// Every state of one trajectory against every state of the other.
    #[default]
    AllPairs,
    /// `s_t` against `s'_t` for `t` up to the shorter length.
    TimeAligned,
}

/// A weighted sum of acquisition terms; a plain AF is one term of weight 1.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Acquisition {
    pub terms: Vec<(AfTag, f64)>,
}

impl Acquisition {
    pub fn single(tag: AfTag) -> Self {
        Self { terms: vec![(tag, 1.0)] }
    }

    pub fn hybrid(terms: Vec<(AfTag, f64)>) -> Result<Self> {
        if terms.is_empty() || terms.iter().any(|(_, w)| !w.is_finite()) {
            return Err(config_err!("a hybrid acquisition needs finite weights on at least one term"));
        }
        Ok(Self { terms })
    }

    fn weight(&self, tag: AfTag) -> f64 {
        self.terms.iter().filter(|(t, _)| *t == tag).map(|(_, w)| w).sum()
    }
}

/// Embedded states of the labeled trajectories, grouped by trajectory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NoveltySet {
    dim: usize,
    groups: Vec<Vec<f64>>,
}

impl NoveltySet {
    pub fn new(dim: usize) -> Self {
        Self { dim, groups: Vec::new() }
    }

    /// Adds one trajectory given its embedded states.
    pub fn push(&mut self, embedded: &[Vec<f64>]) {
        self.groups.push(embedded.iter().flat_map(|e| e.iter().copied()).collect());
    }

    pub fn from_states(model: &GenerativeModel, trajectories: &[Vec<Vec<f64>>]) -> Result<Self> {
        let mut set = Self::new(model.latent_dim());
        for t in trajectories {
            let e = t.iter().map(|s| model.encode(s)).collect::<Result<Vec<_>>>()?;
            set.push(&e);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// Everything an acquisition function reads besides the trajectory.
#[derive(Clone, Copy)]
pub struct AfContext<'a> {
    pub reward: &'a dyn RewardModel,
    pub generative: &'a GenerativeModel,
    pub novelty: &'a NoveltySet,
    pub pairing: NoveltyPairing,
}

/// Value and gradient w.r.t. each state of the trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct AfValue {
    pub value: f64,
    pub d_states: Vec<Vec<f64>>,
}

/// Indices of the states whose `s'` role is labeled: `s₁..s_T`, or `s₀` when `T = 0`.
fn labeled_states(num_states: usize) -> core::ops::Range<usize> {
    if num_states == 1 {
        0..1
    } else {
        1..num_states
    }
}

/// Evaluates the acquisition on trajectory states `s₀..s_T`.
pub fn evaluate(acq: &Acquisition, ctx: &AfContext<'_>, states: &[Vec<f64>]) -> Result<AfValue> {
    if states.is_empty() {
        return Err(config_err!("acquisition needs at least one state"));
    }
    let mut d_states: Vec<Vec<f64>> = states.iter().map(|s| vec![0.0; s.len()]).collect();
    let mut value = 0.0;
    let idx = labeled_states(states.len());
    let n = idx.len();

    let w_reward = acq.weight(AfTag::RewardMax) - acq.weight(AfTag::RewardMin);
    let w_dis = acq.weight(AfTag::Uncertainty) / n as f64;
    if w_reward != 0.0 || w_dis != 0.0 {
        let feat = ctx.reward.featurizer();
        let d = ctx.reward.feature_dim();
        let mut xs = Vec::with_capacity(n * d);
        for i in idx.clone() {
            xs.extend(feat.features(ctx.generative, &states[i])?);
        }
        let (vals, grad) = ctx.reward.weighted_batch(&xs, n, w_reward, w_dis)?;
        value += vals.iter().sum::<f64>();
        for (row, i) in idx.clone().enumerate() {
            let ds = feat.features_vjp(ctx.generative, &states[i], &grad[row * d..(row + 1) * d])?;
            d_states[i].iter_mut().zip(&ds).for_each(|(a, b)| *a += b);
        }
    }

    let w_nov = acq.weight(AfTag::Novelty);
    if w_nov != 0.0 && !ctx.novelty.is_empty() {
        let emb = states.iter().map(|s| ctx.generative.encode(s)).collect::<Result<Vec<_>>>()?;
        let (v, d_emb) = novelty(&emb, ctx.novelty, ctx.pairing);
        value += w_nov * v;
        for (i, de) in d_emb.iter().enumerate() {
            let g: Vec<f64> = de.iter().map(|x| w_nov * x).collect();
            let ds = ctx.generative.encode_vjp(&states[i], &g)?;
            d_states[i].iter_mut().zip(&ds).for_each(|(a, b)| *a += b);
        }
    }
    Ok(AfValue { value, d_states })
}

/// Mean trajectory distance to the labeled set and its gradient w.r.t. the
/// embedded states. Each pairwise term is `−exp(−‖e − e'‖)`.
pub fn novelty(emb: &[Vec<f64>], set: &NoveltySet, pairing: NoveltyPairing) -> (f64, Vec<Vec<f64>>) {
    let mut grad: Vec<Vec<f64>> = emb.iter().map(|e| vec![0.0; e.len()]).collect();
    if set.is_empty() {
        return (0.0, grad);
    }
    let dim = set.dim;
    let inv_groups = 1.0 / set.groups.len() as f64;
    let mut total = 0.0;
    let mut diff = vec![0.0; dim];
    for g in &set.groups {
        let other = g.len() / dim;
        let pairs: Vec<(usize, usize)> = match pairing {
            NoveltyPairing::AllPairs => (0..emb.len()).flat_map(|i| (0..other).map(move |j| (i, j))).collect(),
            NoveltyPairing::TimeAligned => (0..emb.len().min(other)).map(|t| (t, t)).collect(),
        };
        let scale = inv_groups / pairs.len() as f64;
        for (i, j) in pairs {
            let e2 = &g[j * dim..(j + 1) * dim];
            for k in 0..dim {
                diff[k] = emb[i][k] - e2[k];
            }
            let dist = math::norm(&diff);
            let k_val = math::exp(-dist);
            total -= scale * k_val;
            if dist > 0.0 {
                let c = scale * k_val / dist;
                grad[i].iter_mut().zip(&diff).for_each(|(a, d)| *a += c * d);
            }
        }
    }
    (total, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::nav2d::{NavWorld, NAV_REWARDS};
    use crate::generative::NavModel;
    use crate::numerics::{Activation, Arch, Head};
    use crate::reward_model::{ConstantModel, DiscOracleModel, Featurizer, RewardEnsemble};

    fn nav() -> GenerativeModel {
        GenerativeModel::Nav(NavModel { start: [0.0, 0.0], sigma: 0.001 })
    }

    fn random_ensemble(seed: u64, rewards: Vec<f64>) -> RewardEnsemble {
        let arch = Arch::with_hidden(2, &[8, 8], 3, Activation::Tanh, Head::Softmax).unwrap();
        let e = RewardEnsemble::init(&arch, 3, rewards.clone(), Featurizer::NextState, seed).unwrap();
        let members = e
            .members()
            .iter()
            .map(|m| {
                let mut m = m.clone();
                m.values_mut().iter_mut().for_each(|v| *v *= 3.0);
                m
            })
            .collect();
        RewardEnsemble::new(members, rewards, Featurizer::NextState).unwrap()
    }

    fn ctx<'a>(r: &'a dyn RewardModel, g: &'a GenerativeModel, n: &'a NoveltySet) -> AfContext<'a> {
        AfContext { reward: r, generative: g, novelty: n, pairing: NoveltyPairing::AllPairs }
    }

    #[test]
    fn uncertainty_is_mean_disagreement() {
        let e = random_ensemble(3, NAV_REWARDS.to_vec());
        let g = nav();
        let empty = NoveltySet::new(2);
        let c = ctx(&e, &g, &empty);
        let tau = vec![vec![0.0, 0.0], vec![0.3, 0.6], vec![0.8, 0.1]];
        let ju = evaluate(&Acquisition::single(AfTag::Uncertainty), &c, &tau).unwrap().value;
        let d1 = e.disagreement(&tau[1]).unwrap();
        let d2 = e.disagreement(&tau[2]).unwrap();
        assert!((ju - (d1 + d2) / 2.0).abs() < 1e-12);
        let one = evaluate(&Acquisition::single(AfTag::Uncertainty), &c, &tau[..2]).unwrap().value;
        assert!((one - d1).abs() < 1e-12);

        let same = RewardEnsemble::new(vec![e.members()[0].clone(), e.members()[0].clone()], NAV_REWARDS.to_vec(), Featurizer::NextState).unwrap();
        let c = ctx(&same, &g, &empty);
        assert_eq!(evaluate(&Acquisition::single(AfTag::Uncertainty), &c, &tau).unwrap().value, 0.0);
    }

    #[test]
    fn reward_terms_negate_exactly() {
        let e = random_ensemble(4, NAV_REWARDS.to_vec());
        let g = nav();
        let empty = NoveltySet::new(2);
        let c = ctx(&e, &g, &empty);
        for tau in [vec![vec![0.0, 0.0], vec![0.2, 0.9]], vec![vec![0.5, 0.5]], vec![vec![0.1, 0.1], vec![0.9, 0.2], vec![0.4, 0.4]]] {
            let p = evaluate(&Acquisition::single(AfTag::RewardMax), &c, &tau).unwrap();
            let m = evaluate(&Acquisition::single(AfTag::RewardMin), &c, &tau).unwrap();
            assert_eq!(p.value, -m.value);
        }
        let uniform = ConstantModel { probs: vec![1.0 / 3.0; 3], rewards: NAV_REWARDS.to_vec(), dim: 2 };
        let c = ctx(&uniform, &g, &empty);
        let tau = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![0.2, 0.0]];
        let jp = evaluate(&Acquisition::single(AfTag::RewardMax), &c, &tau).unwrap().value;
        assert!((jp - 2.0 * -3.0).abs() < 1e-12);
    }

    #[test]
    fn in_goal_reward_under_oracle_model() {
        let world = NavWorld::default();
        let oracle = DiscOracleModel::from_world(&world, 200.0);
        let g = nav();
        let empty = NoveltySet::new(2);
        let c = ctx(&oracle, &g, &empty);
        let tau = vec![vec![0.25, 0.25], vec![0.26, 0.25], vec![0.27, 0.24]];
        let jp = evaluate(&Acquisition::single(AfTag::RewardMax), &c, &tau).unwrap().value;
        assert!((jp - 2.0).abs() < 1e-3, "{jp}");
    }

    #[test]
    fn reward_scaling_preserves_argmax() {
        let base = random_ensemble(8, NAV_REWARDS.to_vec());
        let scaled = RewardEnsemble::new(base.members().to_vec(), NAV_REWARDS.iter().map(|r| 2.5 * r).collect(), Featurizer::NextState).unwrap();
        let g = nav();
        let empty = NoveltySet::new(2);
        let candidates: Vec<Vec<Vec<f64>>> = (0..25).map(|i| vec![vec![0.0, 0.0], vec![(i % 5) as f64 * 0.25, (i / 5) as f64 * 0.25]]).collect();
        let score = |m: &RewardEnsemble| -> Vec<f64> {
            candidates.iter().map(|t| evaluate(&Acquisition::single(AfTag::RewardMax), &ctx(m, &g, &empty), t).unwrap().value).collect()
        };
        let a = score(&base);
        let b = score(&scaled);
        for (x, y) in a.iter().zip(&b) {
            assert!((2.5 * x - y).abs() < 1e-10);
        }
        assert_eq!(math::argmax(&a), math::argmax(&b));
    }

    #[test]
    fn novelty_examples() {
        let mut set = NoveltySet::new(2);
        set.push(&[vec![0.3, 0.4]]);
        let (v, _) = novelty(&[vec![0.3, 0.4]], &set, NoveltyPairing::AllPairs);
        assert_eq!(v, -1.0);
        let mut far = NoveltySet::new(2);
        far.push(&[vec![6.0, 8.0]]);
        let (v, _) = novelty(&[vec![0.0, 0.0]], &far, NoveltyPairing::AllPairs);
        assert!((v + (-10.0f64).exp()).abs() < 1e-18 && (v + 4.54e-5).abs() < 1e-7);
        let mut two = NoveltySet::new(2);
        two.push(&[vec![0.0, 0.0]]);
        two.push(&[vec![1.0, 0.0]]);
        let (v, _) = novelty(&[vec![0.0, 0.0]], &two, NoveltyPairing::AllPairs);
        assert!((v + (1.0 + (-1.0f64).exp()) / 2.0).abs() < 1e-15);
        assert_eq!(novelty(&[vec![0.0, 0.0]], &NoveltySet::new(2), NoveltyPairing::AllPairs).0, 0.0);
    }

    #[test]
    fn pairings_differ_on_multi_state_trajectories() {
        let mut set = NoveltySet::new(2);
        set.push(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
        let tau = [vec![0.0, 0.0], vec![1.0, 0.0]];
        let (aligned, _) = novelty(&tau, &set, NoveltyPairing::TimeAligned);
        let (all, _) = novelty(&tau, &set, NoveltyPairing::AllPairs);
        assert_eq!(aligned, -1.0);
        assert!((all + (2.0 + 2.0 * (-1.0f64).exp()) / 4.0).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let e = random_ensemble(5, NAV_REWARDS.to_vec());
        let g = nav();
        let mut set = NoveltySet::new(2);
        set.push(&[vec![0.0, 0.0], vec![0.4, 0.2]]);
        set.push(&[vec![0.7, 0.7]]);
        let tau = vec![vec![0.1, 0.2], vec![0.35, 0.55], vec![0.6, 0.3]];
        for pairing in [NoveltyPairing::AllPairs, NoveltyPairing::TimeAligned] {
            let c = AfContext { reward: &e, generative: &g, novelty: &set, pairing };
            let hybrid = Acquisition::hybrid(vec![(AfTag::RewardMax, 1.0), (AfTag::Novelty, 2.0), (AfTag::Uncertainty, 0.5)]).unwrap();
            let mut acqs: Vec<Acquisition> = AfTag::ALL.iter().map(|t| Acquisition::single(*t)).collect();
            acqs.push(hybrid);
            for acq in &acqs {
                let v = evaluate(acq, &c, &tau).unwrap();
                for i in 0..3 {
                    for j in 0..2 {
                        let h = 1e-6;
                        let mut up = tau.clone();
                        up[i][j] += h;
                        let mut dn = tau.clone();
                        dn[i][j] -= h;
                        let fd = (evaluate(acq, &c, &up).unwrap().value - evaluate(acq, &c, &dn).unwrap().value) / (2.0 * h);
                        let an = v.d_states[i][j];
                        assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1e-3), "{acq:?} {i} {j}: {fd} vs {an}");
                    }
                }
            }
        }
    }

    #[test]
    fn novelty_stays_in_range() {
        let mut set = NoveltySet::new(2);
        set.push(&[vec![0.0, 0.0], vec![0.4, 0.2]]);
        for p in [[0.0, 0.0], [0.5, 0.5], [30.0, -4.0]] {
            let (v, _) = novelty(&[p.to_vec()], &set, NoveltyPairing::AllPairs);
            assert!((-1.0..0.0).contains(&v));
        }
    }

    #[test]
    fn tag_names_round_trip() {
        for t in AfTag::ALL {
            assert_eq!(AfTag::from_name(t.name()), Some(t));
        }
        assert!(Acquisition::hybrid(vec![]).is_err());
    }
}
