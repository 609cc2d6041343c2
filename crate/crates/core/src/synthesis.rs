//! Query synthesis: gradient ascent on `J(τ) + λ log p(τ)` over latent
//! trajectory variables, by collocation (free states) or shooting (states
//! rolled out through the dynamics mean).

use alloc::vec;
use alloc::vec::Vec;

use crate::acquisition::{self, AfContext, Acquisition};
use crate::error::{config_err, Error, Result};
use crate::generative::{GenerativeModel, Trajectory};
use crate::math;
use crate::numerics::{AdamConfig, AdamState};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "kebab-case"))]
pub enum Solver {
    /// States are free variables; dynamics enter through `λ log p(τ)`.
    Collocation { lambda: f64 },
    /// Only the start and actions are free; no likelihood term.
    Shooting,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "kebab-case"))]
pub enum StartPolicy {
    /// Fix `z₀` to the model's delta start.
    Clamp,
    /// Treat `z₀` as a decision variable, initialized from the initial-state model.
    Optimize,
    /// Draw `z₀` from the initial-state model once per restart and hold it.
    Sample,
}

/// Projections applied after every optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Bounds {
    /// Per-coordinate box on free latent states.
    pub latent_box: Option<(f64, f64)>,
    /// Euclidean bound on each action.
    pub max_speed: Option<f64>,
}

impl Bounds {
    pub fn project_latent(&self, z: &mut [f64]) {
        if let Some((lo, hi)) = self.latent_box {
            z.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        }
    }

    pub fn project_action(&self, a: &mut [f64]) {
        if let Some(r) = self.max_speed {
            let n = math::norm(a);
            if n > r {
                a.iter_mut().for_each(|v| *v *= r / n);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisProblem {
    pub acquisition: Acquisition,
    pub solver: Solver,
    pub horizon: usize,
    pub start: StartPolicy,
    pub iterations: usize,
    pub restarts: usize,
    pub adam: AdamConfig,
    pub bounds: Bounds,
    /// Random initializations screened per restart; the best one is refined.
    pub init_candidates: usize,
}

impl SynthesisProblem {
    pub fn new(acquisition: Acquisition, solver: Solver, horizon: usize, start: StartPolicy) -> Self {
        Self {
            acquisition,
            solver,
            horizon,
            start,
            iterations: 300,
            restarts: 4,
            adam: AdamConfig::trajectory(),
            bounds: Bounds::default(),
            init_candidates: 8,
        }
    }

    pub fn validate(&self, model: &GenerativeModel) -> Result<()> {
        if let Solver::Collocation { lambda } = self.solver {
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return Err(config_err!("λ must be a finite nonnegative weight; use the shooting solver for λ = ∞"));
            }
        }
        if self.iterations == 0 || self.restarts == 0 {
            return Err(config_err!("iteration budget and restarts must be positive"));
        }
        if self.horizon > 0 && !model.has_dynamics() {
            return Err(config_err!("horizon {} needs a dynamics model", self.horizon));
        }
        if matches!(self.solver, Solver::Shooting) && !model.has_dynamics() {
            return Err(config_err!("shooting needs a dynamics model"));
        }
        if self.start == StartPolicy::Clamp && model.fixed_start().is_none() {
            return Err(config_err!("clamping the start needs a delta initial state"));
        }
        self.adam.validate()
    }

    fn lambda(&self) -> f64 {
        match self.solver {
            Solver::Collocation { lambda } => lambda,
            Solver::Shooting => 0.0,
        }
    }
}

/// Position of each block inside the flat decision vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    z_dim: usize,
    a_dim: usize,
    horizon: usize,
    free_start: bool,
    free_states: bool,
}

impl Layout {
    fn new(problem: &SynthesisProblem, model: &GenerativeModel) -> Self {
        Self {
            z_dim: model.latent_dim(),
            a_dim: model.action_dim(),
            horizon: problem.horizon,
            free_start: problem.start == StartPolicy::Optimize,
            free_states: matches!(problem.solver, Solver::Collocation { .. }),
        }
    }

    fn start_len(&self) -> usize {
        if self.free_start {
            self.z_dim
        } else {
            0
        }
    }

    fn action_offset(&self, t: usize) -> usize {
        self.start_len() + t * self.a_dim
    }

    fn state_offset(&self, t: usize) -> usize {
        debug_assert!(t >= 1);
        self.action_offset(self.horizon) + (t - 1) * self.z_dim
    }

    fn len(&self) -> usize {
        self.start_len() + self.horizon * self.a_dim + if self.free_states { self.horizon * self.z_dim } else { 0 }
    }

    /// Latent states and actions encoded by `vars`, with a fixed `z₀` if not free.
    fn unpack(&self, vars: &[f64], fixed_start: &[f64], model: &GenerativeModel) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let z0 = if self.free_start { vars[..self.z_dim].to_vec() } else { fixed_start.to_vec() };
        let actions: Vec<Vec<f64>> = (0..self.horizon).map(|t| vars[self.action_offset(t)..self.action_offset(t) + self.a_dim].to_vec()).collect();
        let mut z = Vec::with_capacity(self.horizon + 1);
        z.push(z0);
        for t in 0..self.horizon {
            if self.free_states {
                let o = self.state_offset(t + 1);
                z.push(vars[o..o + self.z_dim].to_vec());
            } else {
                let next = model.dynamics_mean(&z[t], &actions[t])?;
                z.push(next);
            }
        }
        Ok((z, actions))
    }
}

/// Everything the objective reads.
#[derive(Clone, Copy)]
pub struct SynthesisContext<'a> {
    pub af: AfContext<'a>,
}

/// Value of `J + λ log p` with its decomposition and gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    pub af_value: f64,
    pub log_likelihood: Option<f64>,
    pub grad: Vec<f64>,
}

fn objective_at(problem: &SynthesisProblem, layout: &Layout, ctx: &SynthesisContext<'_>, vars: &[f64], fixed_start: &[f64]) -> Result<ObjectiveValue> {
    let model = ctx.af.generative;
    let (z, actions) = layout.unpack(vars, fixed_start, model)?;
    let states = z.iter().map(|zt| model.decode(zt)).collect::<Result<Vec<_>>>()?;
    let af = acquisition::evaluate(&problem.acquisition, &ctx.af, &states)?;
    let mut dz: Vec<Vec<f64>> = Vec::with_capacity(z.len());
    for (zt, ds) in z.iter().zip(&af.d_states) {
        dz.push(model.decode_vjp(zt, ds)?);
    }
    let mut da: Vec<Vec<f64>> = actions.iter().map(|a| vec![0.0; a.len()]).collect();

    let lambda = problem.lambda();
    let has_terms = layout.horizon > 0 || model.log_initial(&z[0]).is_some();
    let (ll, value) = if has_terms {
        let (ll, g) = model.log_likelihood_latent(&z, &actions)?;
        if lambda != 0.0 {
            for (acc, gz) in dz.iter_mut().zip(&g.latents) {
                acc.iter_mut().zip(gz).for_each(|(a, b)| *a += lambda * b);
            }
            for (acc, ga) in da.iter_mut().zip(&g.actions) {
                acc.iter_mut().zip(ga).for_each(|(a, b)| *a += lambda * b);
            }
        }
        (Some(ll), af.value + lambda * ll)
    } else {
        (None, af.value)
    };

    if !layout.free_states {
        // reverse pass through the rolled-out dynamics
        for t in (0..layout.horizon).rev() {
            let (dzt, dat) = model.dynamics_mean_vjp(&z[t], &actions[t], &dz[t + 1])?;
            dz[t].iter_mut().zip(&dzt).for_each(|(a, b)| *a += b);
            da[t].iter_mut().zip(&dat).for_each(|(a, b)| *a += b);
        }
    }

    let mut grad = vec![0.0; layout.len()];
    if layout.free_start {
        grad[..layout.z_dim].copy_from_slice(&dz[0]);
    }
    for t in 0..layout.horizon {
        let o = layout.action_offset(t);
        grad[o..o + layout.a_dim].copy_from_slice(&da[t]);
        if layout.free_states {
            let o = layout.state_offset(t + 1);
            grad[o..o + layout.z_dim].copy_from_slice(&dz[t + 1]);
        }
    }
    Ok(ObjectiveValue { value, af_value: af.value, log_likelihood: ll, grad })
}

/// Objective and gradient at a flat decision vector `[z₀?, a₀..a_{T−1}, z₁..z_T?]`.
pub fn objective(problem: &SynthesisProblem, ctx: &SynthesisContext<'_>, vars: &[f64], fixed_start: &[f64]) -> Result<ObjectiveValue> {
    let layout = Layout::new(problem, ctx.af.generative);
    if vars.len() != layout.len() {
        return Err(crate::error::shape_err!("decision vector has {} values, layout needs {}", vars.len(), layout.len()));
    }
    objective_at(problem, &layout, ctx, vars, fixed_start)
}

/// Length of the flat decision vector for `problem`.
pub fn decision_len(problem: &SynthesisProblem, model: &GenerativeModel) -> usize {
    Layout::new(problem, model).len()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub trajectory: Trajectory,
    /// Objective at every iterate of the winning restart.
    pub trace: Vec<f64>,
    pub objective: f64,
    pub af_value: f64,
    pub log_likelihood: Option<f64>,
    pub restart: usize,
}

impl QueryResult {
    /// Running maximum of the trace.
    pub fn envelope(&self) -> Vec<f64> {
        let mut best = f64::NEG_INFINITY;
        self.trace
            .iter()
            .map(|v| {
                best = best.max(*v);
                best
            })
            .collect()
    }
}

fn initial_vars(problem: &SynthesisProblem, layout: &Layout, model: &GenerativeModel, fixed_start: &[f64], stream: &mut Stream) -> Vec<f64> {
    let mut vars = vec![0.0; layout.len()];
    if layout.free_start {
        let mut z0 = model.sample_initial_latent(stream);
        problem.bounds.project_latent(&mut z0);
        vars[..layout.z_dim].copy_from_slice(&z0);
    }
    let z0 = if layout.free_start { vars[..layout.z_dim].to_vec() } else { fixed_start.to_vec() };
    let mut prev = z0;
    for t in 0..layout.horizon {
        let a_off = layout.action_offset(t);
        if layout.free_states {
            let mut z: Vec<f64> = match problem.bounds.latent_box {
                Some((lo, hi)) => (0..layout.z_dim).map(|_| rng::uniform(stream, lo, hi)).collect(),
                None => (0..layout.z_dim).map(|_| rng::normal(stream)).collect(),
            };
            problem.bounds.project_latent(&mut z);
            let mut a: Vec<f64> = z.iter().zip(&prev).map(|(n, p)| n - p).collect();
            a.truncate(layout.a_dim);
            problem.bounds.project_action(&mut a);
            vars[a_off..a_off + layout.a_dim].copy_from_slice(&a);
            let s_off = layout.state_offset(t + 1);
            vars[s_off..s_off + layout.z_dim].copy_from_slice(&z);
            prev = z;
        } else {
            let mut a: Vec<f64> = match problem.bounds.max_speed {
                Some(r) if layout.a_dim == 2 => rng::uniform_disc(stream, r).to_vec(),
                _ => (0..layout.a_dim).map(|_| rng::normal(stream)).collect(),
            };
            problem.bounds.project_action(&mut a);
            vars[a_off..a_off + layout.a_dim].copy_from_slice(&a);
        }
    }
    vars
}

fn project(problem: &SynthesisProblem, layout: &Layout, vars: &mut [f64]) {
    if layout.free_start {
        problem.bounds.project_latent(&mut vars[..layout.z_dim]);
    }
    for t in 0..layout.horizon {
        let o = layout.action_offset(t);
        problem.bounds.project_action(&mut vars[o..o + layout.a_dim]);
        if layout.free_states {
            let o = layout.state_offset(t + 1);
            problem.bounds.project_latent(&mut vars[o..o + layout.z_dim]);
        }
    }
}

struct RestartOutcome {
    best_vars: Vec<f64>,
    best: ObjectiveValue,
    trace: Vec<f64>,
}

fn run_restart(problem: &SynthesisProblem, layout: &Layout, ctx: &SynthesisContext<'_>, fixed_start: &[f64], stream: &mut Stream) -> Result<Option<RestartOutcome>> {
    let model = ctx.af.generative;
    let start_z = if problem.start == StartPolicy::Sample { model.sample_initial_latent(stream) } else { fixed_start.to_vec() };
    let mut vars = Vec::new();
    let mut current: Option<ObjectiveValue> = None;
    for _ in 0..problem.init_candidates.max(1) {
        let cand = initial_vars(problem, layout, model, &start_z, stream);
        let v = objective_at(problem, layout, ctx, &cand, &start_z)?;
        if !v.value.is_finite() {
            continue;
        }
        if current.as_ref().map_or(true, |c| v.value > c.value) {
            vars = cand;
            current = Some(v);
        }
    }
    let Some(mut current) = current else { return Ok(None) };
    let mut opt = AdamState::new(vars.len(), problem.adam);
    let mut trace = Vec::with_capacity(problem.iterations + 1);
    let mut best_vars = vars.clone();
    let mut best = current.clone();
    trace.push(current.value);
    for _ in 0..problem.iterations {
        opt.ascend(&mut vars, &current.grad)?;
        project(problem, layout, &mut vars);
        current = match objective_at(problem, layout, ctx, &vars, &start_z) {
            Ok(v) if v.value.is_finite() && math::all_finite(&v.grad) => v,
            Ok(_) | Err(Error::NonFinite { .. }) | Err(Error::Numeric(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        trace.push(current.value);
        if current.value > best.value {
            best = current.clone();
            best_vars.clone_from(&vars);
        }
    }
    // the fixed start rides along in the returned vector
    if !layout.free_start {
        let mut v = start_z;
        v.extend_from_slice(&best_vars);
        best_vars = v;
    }
    Ok(Some(RestartOutcome { best_vars, best, trace }))
}

/// Solves the synthesis problem; the best restart wins, ties to the lowest index.
pub fn synthesize(problem: &SynthesisProblem, ctx: &SynthesisContext<'_>, seed: u64) -> Result<QueryResult> {
    let model = ctx.af.generative;
    problem.validate(model)?;
    let layout = Layout::new(problem, model);
    let fixed_start = model.fixed_start().unwrap_or_else(|| vec![0.0; model.latent_dim()]);
    let mut winner: Option<(usize, RestartOutcome)> = None;
    for r in 0..problem.restarts {
        let mut outcome = None;
        // a failed restart is retried once on a fresh stream
        for attempt in 0..2u64 {
            let mut stream = rng::substream(seed, ((r as u64) << 1) | attempt);
            outcome = run_restart(problem, &layout, ctx, &fixed_start, &mut stream)?;
            if outcome.is_some() {
                break;
            }
        }
        if let Some(o) = outcome {
            if winner.as_ref().map_or(true, |(_, w)| o.best.value > w.best.value) {
                winner = Some((r, o));
            }
        }
    }
    let (restart, out) = winner.ok_or_else(|| Error::Numeric("every synthesis restart produced a non-finite objective".into()))?;

    let mut unpack_layout = layout;
    unpack_layout.free_start = true;
    let (z, actions) = unpack_layout.unpack(&out.best_vars, &[], model)?;
    let states = z.iter().map(|zt| model.decode(zt)).collect::<Result<Vec<_>>>()?;
    let mut trajectory = Trajectory::new(states, actions)?;
    if matches!(model, GenerativeModel::Class(_)) {
        trajectory.latents = Some(z);
    }
    Ok(QueryResult {
        trajectory,
        trace: out.trace,
        objective: out.best.value,
        af_value: out.best.af_value,
        log_likelihood: out.best.log_likelihood,
        restart,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::{AfTag, NoveltyPairing, NoveltySet};
    use crate::env::nav2d::{NavWorld, NAV_REWARDS};
    use crate::generative::NavModel;
    use crate::numerics::{Activation, Arch, Head};
    use crate::reward_model::{ConstantModel, DiscOracleModel, Featurizer, RewardEnsemble, RewardModel};

    fn nav(sigma: f64) -> GenerativeModel {
        GenerativeModel::Nav(NavModel { start: [0.0, 0.0], sigma })
    }

    fn nav_bounds() -> Bounds {
        Bounds { latent_box: Some((0.0, 1.0)), max_speed: Some(0.01) }
    }

    fn problem(tag: AfTag, solver: Solver, horizon: usize) -> SynthesisProblem {
        SynthesisProblem { bounds: nav_bounds(), ..SynthesisProblem::new(Acquisition::single(tag), solver, horizon, StartPolicy::Clamp) }
    }

    fn ctx<'a>(r: &'a dyn RewardModel, g: &'a GenerativeModel, n: &'a NoveltySet) -> SynthesisContext<'a> {
        SynthesisContext { af: AfContext { reward: r, generative: g, novelty: n, pairing: NoveltyPairing::AllPairs } }
    }

    #[test]
    fn reward_max_lands_in_goal_and_min_in_trap() {
        let world = NavWorld::default();
        let oracle = DiscOracleModel::from_world(&world, 50.0);
        let g = nav(0.001);
        let empty = NoveltySet::new(2);
        let c = ctx(&oracle, &g, &empty);
        for seed in 0..3 {
            let q = synthesize(&problem(AfTag::RewardMax, Solver::Collocation { lambda: 0.0 }, 1), &c, seed).unwrap();
            assert_eq!(q.trajectory.states[0], vec![0.0, 0.0]);
            assert!(world.in_goal(&q.trajectory.states[1]), "{:?}", q.trajectory.states[1]);
            let q = synthesize(&problem(AfTag::RewardMin, Solver::Collocation { lambda: 0.0 }, 1), &c, seed).unwrap();
            assert!(world.in_trap(&q.trajectory.states[1]), "{:?}", q.trajectory.states[1]);
            assert!(math::norm(&q.trajectory.actions[0]) <= 0.01 + 1e-15);
        }
    }

    #[test]
    fn shooting_output_is_dynamics_feasible() {
        let constant = ConstantModel { probs: vec![0.2, 0.3, 0.5], rewards: NAV_REWARDS.to_vec(), dim: 2 };
        let g = nav(0.001);
        let empty = NoveltySet::new(2);
        let c = ctx(&constant, &g, &empty);
        let q = synthesize(&problem(AfTag::RewardMax, Solver::Shooting, 5), &c, 3).unwrap();
        let t = &q.trajectory;
        assert_eq!(t.horizon(), 5);
        for i in 0..5 {
            assert_eq!(g.dynamics_mean(&t.states[i], &t.actions[i]).unwrap(), t.states[i + 1]);
        }
        assert_eq!(q.restart, 0, "constant objective ties go to restart 0");
    }

    fn random_ensemble(seed: u64) -> RewardEnsemble {
        let arch = Arch::with_hidden(2, &[8, 8], 3, Activation::Tanh, Head::Softmax).unwrap();
        let e = RewardEnsemble::init(&arch, 3, NAV_REWARDS.to_vec(), Featurizer::NextState, seed).unwrap();
        let members = e
            .members()
            .iter()
            .map(|m| {
                let mut m = m.clone();
                m.values_mut().iter_mut().for_each(|v| *v *= 3.0);
                m
            })
            .collect();
        RewardEnsemble::new(members, NAV_REWARDS.to_vec(), Featurizer::NextState).unwrap()
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let e = random_ensemble(2);
        let g = nav(0.05);
        let mut set = NoveltySet::new(2);
        set.push(&[vec![0.0, 0.0], vec![0.3, 0.1]]);
        let c = ctx(&e, &g, &set);
        let mut s = rng::stream(7);
        let mut acqs: Vec<Acquisition> = AfTag::ALL.iter().map(|t| Acquisition::single(*t)).collect();
        acqs.push(Acquisition::hybrid(vec![(AfTag::RewardMax, 1.0), (AfTag::Novelty, 1.0)]).unwrap());
        for acq in acqs {
            for solver in [Solver::Collocation { lambda: 0.0 }, Solver::Collocation { lambda: 0.3 }, Solver::Shooting] {
                for start in [StartPolicy::Clamp, StartPolicy::Optimize] {
                    let p = SynthesisProblem { acquisition: acq.clone(), ..problem(AfTag::Novelty, solver, 3) };
                    let p = SynthesisProblem { start, ..p };
                    let n = decision_len(&p, &g);
                    let vars: Vec<f64> = (0..n).map(|_| rng::uniform(&mut s, 0.05, 0.4)).collect();
                    let fs = [0.1, 0.05];
                    let v = objective(&p, &c, &vars, &fs).unwrap();
                    for i in 0..n {
                        let h = 1e-6;
                        let mut up = vars.clone();
                        up[i] += h;
                        let mut dn = vars.clone();
                        dn[i] -= h;
                        let fd = (objective(&p, &c, &up, &fs).unwrap().value - objective(&p, &c, &dn, &fs).unwrap().value) / (2.0 * h);
                        assert!((fd - v.grad[i]).abs() <= 1e-4 * fd.abs().max(1e-2), "{solver:?} {start:?} {i}: {fd} vs {}", v.grad[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn likelihood_term_is_linear_in_lambda() {
        let e = random_ensemble(3);
        let g = nav(0.05);
        let empty = NoveltySet::new(2);
        let c = ctx(&e, &g, &empty);
        let vars = [0.01, 0.0, 0.002, 0.003, 0.3, 0.2, 0.31, 0.21];
        let at = |l: f64| objective(&problem(AfTag::Uncertainty, Solver::Collocation { lambda: l }, 2), &c, &vars, &[0.0, 0.0]).unwrap();
        let (v0, v1, v2) = (at(0.0), at(1.0), at(2.0));
        assert_eq!(v0.value, v0.af_value);
        assert!(((v2.value - v0.value) - 2.0 * (v1.value - v0.value)).abs() < 1e-9 * v2.value.abs().max(1.0));
    }

    #[test]
    fn envelope_is_monotone_and_runs_are_deterministic() {
        let e = random_ensemble(4);
        let g = nav(0.001);
        let empty = NoveltySet::new(2);
        let c = ctx(&e, &g, &empty);
        let p = problem(AfTag::Uncertainty, Solver::Collocation { lambda: 0.0 }, 1);
        let a = synthesize(&p, &c, 11).unwrap();
        let b = synthesize(&p, &c, 11).unwrap();
        assert_eq!(a, b);
        let env = a.envelope();
        assert!(env.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(*env.last().unwrap(), a.objective);
    }

    #[test]
    fn large_lambda_raises_likelihood() {
        let e = random_ensemble(5);
        let g = nav(0.01);
        let empty = NoveltySet::new(2);
        let c = ctx(&e, &g, &empty);
        let mut wins = 0;
        for seed in 0..10 {
            let free = synthesize(&problem(AfTag::Uncertainty, Solver::Collocation { lambda: 0.0 }, 2), &c, seed).unwrap();
            let reg = synthesize(&problem(AfTag::Uncertainty, Solver::Collocation { lambda: 1e3 }, 2), &c, seed).unwrap();
            if reg.log_likelihood.unwrap() >= free.log_likelihood.unwrap() {
                wins += 1;
            }
        }
        assert_eq!(wins, 10);
    }

    #[test]
    fn invalid_problems_are_rejected() {
        let g = nav(0.01);
        let mut p = problem(AfTag::RewardMax, Solver::Collocation { lambda: -1.0 }, 1);
        assert!(p.validate(&g).is_err());
        p.solver = Solver::Collocation { lambda: f64::INFINITY };
        assert!(p.validate(&g).is_err());
        p.solver = Solver::Shooting;
        p.iterations = 0;
        assert!(p.validate(&g).is_err());
    }
}
