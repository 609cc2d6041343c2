//! Receding-horizon control on a learned reward: Adam over an open-loop action
//! sequence `a₀..a_H`, scored by the summed reward of the predicted transitions.

use alloc::vec;
use alloc::vec::Vec;

use crate::env::nav2d::NavWorld;
use crate::env::Split;
use crate::error::{config_err, Error, Result};
use crate::generative::{GenerativeModel, Trajectory};
use crate::math;
use crate::numerics::{AdamConfig, AdamState};
use crate::reward_model::RewardModel;
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default))]
pub struct PlannerConfig {
    /// Planning horizon `H`; plans hold `H + 1` actions.
    pub horizon: usize,
    /// Adam iterations for a plan from scratch.
    pub iterations: usize,
    /// Adam iterations when refining a warm-started plan.
    pub replan_iterations: usize,
    pub restarts: usize,
    pub step_size: f64,
    /// Actions executed between replans.
    pub replan_interval: usize,
    /// Side of the grid searched for the initial waypoint.
    pub waypoint_grid: usize,
    /// Random detour candidates screened per waypoint restart.
    pub detour_candidates: usize,
    /// Box containing waypoints.
    pub waypoint_box: (f64, f64),
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            horizon: 500,
            iterations: 100,
            replan_iterations: 10,
            restarts: 4,
            step_size: 1e-3,
            replan_interval: 1,
            waypoint_grid: 21,
            detour_candidates: 8,
            waypoint_box: (0.0, 1.0),
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(config_err!("planning horizon must be at least 1"));
        }
        if self.replan_interval == 0 || self.replan_interval > self.horizon {
            return Err(config_err!("replan interval must lie in 1..=H, got {}", self.replan_interval));
        }
        if self.restarts == 0 || self.iterations == 0 {
            return Err(config_err!("planner restarts and iterations must be positive"));
        }
        if self.waypoint_grid < 2 {
            return Err(config_err!("waypoint grid needs at least 2 points per side"));
        }
        AdamConfig::trajectory().with_step_size(self.step_size).validate()
    }
}

/// What the planner optimizes through.
#[derive(Clone, Copy)]
pub struct PlanContext<'a> {
    pub reward: &'a dyn RewardModel,
    pub model: &'a GenerativeModel,
    pub max_speed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub actions: Vec<Vec<f64>>,
    pub objective: f64,
    pub restart: usize,
}

/// Summed predicted reward of `actions` from `s` and its gradient.
pub fn plan_objective(ctx: &PlanContext<'_>, s: &[f64], actions: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    let (value, grad) = rollout_value(ctx, s, actions, true)?;
    Ok((value, grad.unwrap_or_default()))
}

fn rollout_value(ctx: &PlanContext<'_>, s: &[f64], actions: &[Vec<f64>], want_grad: bool) -> Result<(f64, Option<Vec<Vec<f64>>>)> {
    let model = ctx.model;
    let feat = ctx.reward.featurizer();
    let d = ctx.reward.feature_dim();
    let n = actions.len();
    let mut states = Vec::with_capacity(n + 1);
    states.push(model.encode(s)?);
    for (t, a) in actions.iter().enumerate() {
        let next = model.dynamics_mean(&states[t], a)?;
        states.push(next);
    }
    let decoded = states.iter().map(|z| model.decode(z)).collect::<Result<Vec<_>>>()?;
    let mut xs = Vec::with_capacity(n * d);
    for sd in &decoded[1..] {
        xs.extend(feat.features(model, sd)?);
    }
    if !want_grad {
        let r = ctx.reward.reward_batch(&xs, n)?;
        return Ok((r.iter().sum(), None));
    }
    let (vals, g) = ctx.reward.weighted_batch(&xs, n, 1.0, 0.0)?;
    let value: f64 = vals.iter().sum();
    // reverse pass: feature → state → latent, then through the dynamics
    let mut carry = vec![0.0; states[0].len()];
    let mut grads = vec![Vec::new(); n];
    for t in (0..n).rev() {
        let ds = feat.features_vjp(model, &decoded[t + 1], &g[t * d..(t + 1) * d])?;
        let dz = model.decode_vjp(&states[t + 1], &ds)?;
        carry.iter_mut().zip(&dz).for_each(|(c, x)| *c += x);
        let (dz_prev, da) = model.dynamics_mean_vjp(&states[t], &actions[t], &carry)?;
        grads[t] = da;
        carry = dz_prev;
    }
    Ok((value, Some(grads)))
}

fn project(actions: &mut [Vec<f64>], max_speed: f64) {
    for a in actions {
        let n = math::norm(a);
        if n > max_speed {
            a.iter_mut().for_each(|v| *v *= max_speed / n);
        }
    }
}

/// Straight segments at full speed through `waypoints`, then holding still.
fn waypoint_plan(s: &[f64], waypoints: &[[f64; 2]], len: usize, max_speed: f64) -> Vec<Vec<f64>> {
    let mut plan = Vec::with_capacity(len);
    let mut pos = [s[0], s[1]];
    for w in waypoints {
        while plan.len() < len {
            let delta = [w[0] - pos[0], w[1] - pos[1]];
            let dist = math::norm(&delta);
            if dist < 1e-12 {
                break;
            }
            let step = dist.min(max_speed);
            let a = [delta[0] / dist * step, delta[1] / dist * step];
            pos = [pos[0] + a[0], pos[1] + a[1]];
            plan.push(a.to_vec());
        }
    }
    plan.resize(len, vec![0.0, 0.0]);
    plan
}

/// Grid cell with the highest predicted reward; ties to the lowest index.
fn best_grid_cell(ctx: &PlanContext<'_>, config: &PlannerConfig) -> Result<[f64; 2]> {
    let k = config.waypoint_grid;
    let (lo, hi) = config.waypoint_box;
    let cells: Vec<[f64; 2]> = (0..k * k)
        .map(|i| [lo + (hi - lo) * (i % k) as f64 / (k - 1) as f64, lo + (hi - lo) * (i / k) as f64 / (k - 1) as f64])
        .collect();
    let feat = ctx.reward.featurizer();
    let mut xs = Vec::with_capacity(k * k * ctx.reward.feature_dim());
    for c in &cells {
        xs.extend(feat.features(ctx.model, &ctx.model.decode(c)?)?);
    }
    let r = ctx.reward.reward_batch(&xs, cells.len())?;
    Ok(cells[math::argmax(&r)])
}

struct Refined {
    actions: Vec<Vec<f64>>,
    value: f64,
}

/// Adam ascent keeping the best iterate; `None` if the objective went non-finite.
fn refine(ctx: &PlanContext<'_>, s: &[f64], mut actions: Vec<Vec<f64>>, iterations: usize, step_size: f64) -> Result<Option<Refined>> {
    let dim = actions.first().map_or(0, |a| a.len());
    let mut flat: Vec<f64> = actions.iter().flatten().copied().collect();
    let mut opt = AdamState::new(flat.len(), AdamConfig::trajectory().with_step_size(step_size));
    let (mut value, mut grad) = match plan_objective(ctx, s, &actions) {
        Ok(v) => v,
        Err(Error::NonFinite { .. }) | Err(Error::Numeric(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    if !value.is_finite() {
        return Ok(None);
    }
    let mut best = Refined { actions: actions.clone(), value };
    for _ in 0..iterations {
        let g: Vec<f64> = grad.iter().flatten().copied().collect();
        opt.ascend(&mut flat, &g)?;
        for (a, chunk) in actions.iter_mut().zip(flat.chunks(dim)) {
            a.copy_from_slice(chunk);
        }
        project(&mut actions, ctx.max_speed);
        for (a, chunk) in actions.iter().zip(flat.chunks_mut(dim)) {
            chunk.copy_from_slice(a);
        }
        (value, grad) = match plan_objective(ctx, s, &actions) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) | Err(Error::Numeric(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        if !value.is_finite() {
            return Ok(None);
        }
        if value > best.value {
            best = Refined { actions: actions.clone(), value };
        }
    }
    Ok(Some(best))
}

/// Full-speed path to the best grid waypoint, either straight or via the best
/// of several random detours, chosen by unrefined objective.
fn waypoint_init(config: &PlannerConfig, ctx: &PlanContext<'_>, s: &[f64], goal: [f64; 2], detour: bool, stream: &mut Stream) -> Result<(Vec<Vec<f64>>, f64)> {
    let len = config.horizon + 1;
    let mut best = waypoint_plan(s, &[goal], len, ctx.max_speed);
    let mut best_val = rollout_value(ctx, s, &best, false)?.0;
    if detour {
        let (lo, hi) = config.waypoint_box;
        for _ in 0..config.detour_candidates.max(1) {
            let via = [rng::uniform(stream, lo, hi), rng::uniform(stream, lo, hi)];
            let cand = waypoint_plan(s, &[via, goal], len, ctx.max_speed);
            let v = rollout_value(ctx, s, &cand, false)?.0;
            if v > best_val {
                best_val = v;
                best = cand;
            }
        }
    }
    Ok((best, best_val))
}

/// Plans `H + 1` actions from `s`.
///
/// From scratch, restart 0 refines the zero plan, restart 1 a straight
/// full-speed path to the best grid waypoint, and later restarts the best of
/// several random detours to it. A warm start refines the shifted previous
/// plan for `replan_iterations` and only refines the straight waypoint path
/// when that path already scores higher.
pub fn plan(config: &PlannerConfig, ctx: &PlanContext<'_>, s: &[f64], warm: Option<&[Vec<f64>]>, stream: &mut Stream) -> Result<Plan> {
    config.validate()?;
    if !ctx.model.has_dynamics() {
        return Err(config_err!("planning needs a dynamics model"));
    }
    let len = config.horizon + 1;
    let a_dim = ctx.model.action_dim();
    let mut winner: Option<(usize, Refined)> = None;
    let mut offer = |r: usize, out: Option<Refined>| {
        if let Some(out) = out {
            if winner.as_ref().map_or(true, |(_, w)| out.value > w.value) {
                winner = Some((r, out));
            }
        }
    };
    if let Some(w) = warm {
        let mut init = w.to_vec();
        init.resize(len, vec![0.0; a_dim]);
        let warm_out = refine(ctx, s, init, config.replan_iterations, config.step_size)?;
        let warm_val = warm_out.as_ref().map_or(f64::NEG_INFINITY, |o| o.value);
        offer(0, warm_out);
        if config.restarts > 1 {
            let goal = best_grid_cell(ctx, config)?;
            let (cand, val) = waypoint_init(config, ctx, s, goal, false, stream)?;
            if val > warm_val {
                offer(1, refine(ctx, s, cand, config.replan_iterations, config.step_size)?);
            }
        }
    } else {
        offer(0, refine(ctx, s, vec![vec![0.0; a_dim]; len], config.iterations, config.step_size)?);
        if config.restarts > 1 {
            let goal = best_grid_cell(ctx, config)?;
            for r in 1..config.restarts {
                let (init, _) = waypoint_init(config, ctx, s, goal, r > 1, stream)?;
                offer(r, refine(ctx, s, init, config.iterations, config.step_size)?);
            }
        }
    }
    let (restart, best) = winner.ok_or_else(|| Error::Numeric("every planning restart produced a non-finite objective".into()))?;
    Ok(Plan { actions: best.actions, objective: best.value, restart })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "lowercase"))]
pub enum Outcome {
    Success,
    Crash,
    Timeout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub trajectory: Trajectory,
    pub outcome: Outcome,
    pub split: Split,
}

impl Episode {
    pub fn steps(&self) -> usize {
        self.trajectory.horizon()
    }
}

/// Receding-horizon control in the real environment: execute a plan prefix,
/// replan from the realized state, stop on goal, trap, or the episode cap.
pub fn run_episode(world: &NavWorld, config: &PlannerConfig, reward: &dyn RewardModel, model: &GenerativeModel, split: Split, seed: u64) -> Result<Episode> {
    let start = world.initial_state(split);
    run_episode_from(world, config, reward, model, start, split, seed)
}

pub fn run_episode_from(
    world: &NavWorld,
    config: &PlannerConfig,
    reward: &dyn RewardModel,
    model: &GenerativeModel,
    start: [f64; 2],
    split: Split,
    seed: u64,
) -> Result<Episode> {
    let ctx = PlanContext { reward, model, max_speed: world.max_speed };
    let mut env_stream = rng::substream(seed, 0);
    let mut plan_stream = rng::substream(seed, 1);
    let mut s = start;
    let mut states = vec![s.to_vec()];
    let mut actions: Vec<Vec<f64>> = Vec::new();
    let mut warm: Option<Vec<Vec<f64>>> = None;
    let outcome = 'episode: loop {
        let p = plan(config, &ctx, &s, warm.as_deref(), &mut plan_stream)?;
        for a in p.actions.iter().take(config.replan_interval) {
            let a = world.clip_action([a[0], a[1]]);
            s = world.step(s, a, &mut env_stream);
            actions.push(a.to_vec());
            states.push(s.to_vec());
            if world.in_trap(&s) {
                break 'episode Outcome::Crash;
            }
            if world.in_goal(&s) {
                break 'episode Outcome::Success;
            }
            if actions.len() >= world.episode_cap {
                break 'episode Outcome::Timeout;
            }
        }
        warm = Some(p.actions[config.replan_interval..].to_vec());
    };
    Ok(Episode { trajectory: Trajectory::new(states, actions)?, outcome, split })
}

/// `(successes, crashes, timeouts)`.
pub fn outcome_counts(episodes: &[Episode]) -> (usize, usize, usize) {
    let count = |o| episodes.iter().filter(|e| e.outcome == o).count();
    (count(Outcome::Success), count(Outcome::Crash), count(Outcome::Timeout))
}
