//! The trajectory likelihood model: initial-state density, forward dynamics,
//! and a state encoder/decoder, plus random-rollout data collection.
//!
//! `log p(τ) = log p(s₀) + Σ_t log p(s_{t+1} | s_t, a_t)`, evaluated in latent
//! space. Navigation uses the identity encoder, a delta initial state (whose
//! term is dropped) and hard-coded Gaussian dynamics. The classification
//! domain uses an autoencoder with a standard-normal latent prior and no
//! dynamics (its trajectories are single states).

use alloc::vec;
use alloc::vec::Vec;

use crate::env::gaussclass::ClassWorld;
use crate::env::nav2d::NavWorld;
use crate::env::Split;
use crate::error::{config_err, shape_err, Error, Result};
use crate::math;
use crate::numerics::{Activation, AdamConfig, AdamState, Arch, Head, Mlp};
use crate::rng::{self, Stream};

/// Alternating states and actions `s₀, a₀, …, s_T`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub latents: Option<Vec<Vec<f64>>>,
}

/// One `(s, a, s')` unit of labeling.
#[derive(Debug, Clone, Copy)]
pub struct TransitionRef<'a> {
    pub state: &'a [f64],
    pub action: &'a [f64],
    pub next_state: &'a [f64],
}

impl Trajectory {
    pub fn new(states: Vec<Vec<f64>>, actions: Vec<Vec<f64>>) -> Result<Self> {
        let t = Self { states, actions, latents: None };
        t.validate()?;
        Ok(t)
    }

    pub fn single(state: Vec<f64>) -> Self {
        Self { states: vec![state], actions: Vec::new(), latents: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.states.len() != self.actions.len() + 1 {
            return Err(shape_err!("trajectory has {} states for {} actions", self.states.len(), self.actions.len()));
        }
        if let Some(z) = &self.latents {
            if z.len() != self.states.len() {
                return Err(shape_err!("trajectory has {} latents for {} states", z.len(), self.states.len()));
            }
        }
        Ok(())
    }

    /// Number of transitions `T`.
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    /// The labeled units of this trajectory. A `T = 0` trajectory yields one
    /// degenerate transition `(s₀, ∅, s₀)` so single-state queries can be labeled.
    pub fn transitions(&self) -> Vec<TransitionRef<'_>> {
        if self.actions.is_empty() {
            return vec![TransitionRef { state: &self.states[0], action: &[], next_state: &self.states[0] }];
        }
        (0..self.actions.len())
            .map(|t| TransitionRef { state: &self.states[t], action: &self.actions[t], next_state: &self.states[t + 1] })
            .collect()
    }
}

/// Hard-coded navigation model.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NavModel {
    pub start: [f64; 2],
    pub sigma: f64,
}

/// Autoencoder with standardized latents and a standard-normal prior.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassModel {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GenerativeModel {
    Nav(NavModel),
    Class(ClassModel),
}

/// Per-term gradient of the log-likelihood w.r.t. latent states and actions.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodGrad {
    pub latents: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
}

impl GenerativeModel {
    pub fn state_dim(&self) -> usize {
        match self {
            Self::Nav(_) => 2,
            Self::Class(m) => m.decoder.arch().output_dim(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            Self::Nav(_) => 2,
            Self::Class(m) => m.encoder.arch().output_dim(),
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            Self::Nav(_) => 2,
            Self::Class(_) => 0,
        }
    }

    pub fn has_dynamics(&self) -> bool {
        matches!(self, Self::Nav(_))
    }

    /// The clamped start state of a delta initial distribution, in latent space.
    pub fn fixed_start(&self) -> Option<Vec<f64>> {
        match self {
            Self::Nav(m) => Some(m.start.to_vec()),
            Self::Class(_) => None,
        }
    }

    pub fn encode(&self, state: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::Nav(_) => Ok(state.to_vec()),
            Self::Class(m) => m.encoder.forward(state),
        }
    }

    /// Cotangent of the state given the cotangent of its encoding.
    pub fn encode_vjp(&self, state: &[f64], d_latent: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::Nav(_) => Ok(d_latent.to_vec()),
            Self::Class(m) => {
                let cache = m.encoder.forward_cached(state, 1)?;
                m.encoder.backward(&cache, d_latent, None)
            }
        }
    }

    pub fn decode(&self, latent: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::Nav(_) => Ok(latent.to_vec()),
            Self::Class(m) => m.decoder.forward(latent),
        }
    }

    pub fn decode_vjp(&self, latent: &[f64], d_state: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::Nav(_) => Ok(d_state.to_vec()),
            Self::Class(m) => {
                let cache = m.decoder.forward_cached(latent, 1)?;
                m.decoder.backward(&cache, d_state, None)
            }
        }
    }

    /// Expected next latent state `E[z' | z, a]`.
    pub fn dynamics_mean(&self, latent: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::Nav(_) => Ok(latent.iter().zip(action).map(|(z, a)| z + a).collect()),
            Self::Class(_) => Err(config_err!("the classification domain has no dynamics model")),
        }
    }

    /// `(d z, d a)` given the cotangent of [`GenerativeModel::dynamics_mean`].
    pub fn dynamics_mean_vjp(&self, _latent: &[f64], _action: &[f64], d_next: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            Self::Nav(_) => Ok((d_next.to_vec(), d_next.to_vec())),
            Self::Class(_) => Err(config_err!("the classification domain has no dynamics model")),
        }
    }

    pub fn dynamics_sigma(&self) -> Option<f64> {
        match self {
            Self::Nav(m) => Some(m.sigma),
            Self::Class(_) => None,
        }
    }

    /// `log p(z₀)` and its gradient, or `None` for a delta initial state.
    pub fn log_initial(&self, latent: &[f64]) -> Option<(f64, Vec<f64>)> {
        match self {
            Self::Nav(_) => None,
            Self::Class(_) => {
                let d = latent.len() as f64;
                let v = -0.5 * math::dot(latent, latent) - 0.5 * d * math::LN_2PI;
                Some((v, latent.iter().map(|z| -z).collect()))
            }
        }
    }

    /// `log N(z'; E[z'|z,a], σ²I)` with gradients `(dz, da, dz')`.
    pub fn log_transition(&self, latent: &[f64], action: &[f64], next: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> {
        let sigma = self.dynamics_sigma().ok_or_else(|| config_err!("no dynamics model"))?;
        let mean = self.dynamics_mean(latent, action)?;
        let s2 = sigma * sigma;
        let d = next.len() as f64;
        let resid: Vec<f64> = next.iter().zip(&mean).map(|(x, m)| x - m).collect();
        let value = -0.5 * math::dot(&resid, &resid) / s2 - d * math::ln(sigma) - 0.5 * d * math::LN_2PI;
        let d_next: Vec<f64> = resid.iter().map(|r| -r / s2).collect();
        let d_mean: Vec<f64> = d_next.iter().map(|g| -g).collect();
        let (dz, da) = self.dynamics_mean_vjp(latent, action, &d_mean)?;
        Ok((value, dz, da, d_next))
    }

    /// Latent states of `τ`, from its stored latents or by encoding.
    pub fn latents_of(&self, traj: &Trajectory) -> Result<Vec<Vec<f64>>> {
        match &traj.latents {
            Some(z) => Ok(z.clone()),
            None => traj.states.iter().map(|s| self.encode(s)).collect(),
        }
    }

    /// `log p(τ)` over latents and actions, with its gradient.
    pub fn log_likelihood_latent(&self, latents: &[Vec<f64>], actions: &[Vec<f64>]) -> Result<(f64, LikelihoodGrad)> {
        if latents.len() != actions.len() + 1 {
            return Err(shape_err!("{} latents for {} actions", latents.len(), actions.len()));
        }
        let mut grad = LikelihoodGrad {
            latents: latents.iter().map(|z| vec![0.0; z.len()]).collect(),
            actions: actions.iter().map(|a| vec![0.0; a.len()]).collect(),
        };
        let mut total = 0.0;
        if let Some((v, g)) = self.log_initial(&latents[0]) {
            total += v;
            grad.latents[0] = g;
        }
        for t in 0..actions.len() {
            let (v, dz, da, dn) = self.log_transition(&latents[t], &actions[t], &latents[t + 1])?;
            total += v;
            add_into(&mut grad.latents[t], &dz);
            add_into(&mut grad.actions[t], &da);
            add_into(&mut grad.latents[t + 1], &dn);
        }
        if !total.is_finite() {
            return Err(Error::Numeric("trajectory log-likelihood is not finite".into()));
        }
        Ok((total, grad))
    }

    pub fn log_likelihood(&self, traj: &Trajectory) -> Result<f64> {
        traj.validate()?;
        let z = self.latents_of(traj)?;
        Ok(self.log_likelihood_latent(&z, &traj.actions)?.0)
    }

    /// Draws a latent initial state from the initial-state model.
    pub fn sample_initial_latent(&self, stream: &mut Stream) -> Vec<f64> {
        match self {
            Self::Nav(m) => m.start.to_vec(),
            Self::Class(_) => (0..self.latent_dim()).map(|_| rng::normal(stream)).collect(),
        }
    }
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    acc.iter_mut().zip(x).for_each(|(a, b)| *a += b);
}

/// A benchmark domain together with its world description.
#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    Nav(NavWorld),
    Class(ClassWorld),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default))]
pub struct FitConfig {
    /// Overrides the world's noise scale as the nav dynamics σ.
    pub nav_sigma: Option<f64>,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Fraction of samples held out for the reported reconstruction error.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            nav_sigma: None,
            hidden: vec![64, 64],
            epochs: 60,
            batch_size: 32,
            adam: AdamConfig::network().with_step_size(3e-3),
            holdout: 0.1,
            seed: 17,
        }
    }
}

/// Diagnostics of a fit.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitReport {
    /// Root-mean-square reconstruction error per observation dimension on held-out samples.
    pub holdout_rmse: Option<f64>,
    pub holdout_count: usize,
}

/// Maximum-likelihood fit of the generative model from off-policy rollouts.
pub fn fit(domain: &Domain, rollouts: &[Trajectory], config: &FitConfig) -> Result<(GenerativeModel, FitReport)> {
    if rollouts.is_empty() {
        return Err(config_err!("generative fit needs at least one rollout"));
    }
    match domain {
        Domain::Nav(world) => {
            let sigma = config.nav_sigma.unwrap_or(world.noise_sigma);
            if !(sigma > 0.0) {
                return Err(config_err!("nav dynamics σ must be positive for a density, got {sigma}"));
            }
            let model = NavModel { start: world.initial_state(Split::Train), sigma };
            Ok((GenerativeModel::Nav(model), FitReport::default()))
        }
        Domain::Class(world) => fit_autoencoder(world, rollouts, config),
    }
}

fn fit_autoencoder(world: &ClassWorld, rollouts: &[Trajectory], config: &FitConfig) -> Result<(GenerativeModel, FitReport)> {
    let dim = world.obs_dim();
    let latent = crate::env::gaussclass::LATENT_DIM;
    let mut samples: Vec<&[f64]> = rollouts.iter().flat_map(|t| t.states.iter().map(|s| s.as_slice())).collect();
    if samples.iter().any(|s| s.len() != dim) {
        return Err(shape_err!("rollout states must have the observation width {dim}"));
    }
    let holdout = ((samples.len() as f64) * config.holdout.clamp(0.0, 0.5)) as usize;
    if samples.len() - holdout < 10 * (latent + 1) {
        return Err(config_err!("{} samples are too few to fit an autoencoder", samples.len()));
    }
    let mut stream = rng::stream(config.seed);
    rng::shuffle(&mut stream, &mut samples);
    let (held, train) = samples.split_at(holdout);

    let enc_arch = Arch::with_hidden(dim, &config.hidden, latent, Activation::Tanh, Head::Linear)?;
    let mut dec_hidden = config.hidden.clone();
    dec_hidden.reverse();
    let dec_arch = Arch::with_hidden(latent, &dec_hidden, dim, Activation::Tanh, Head::Linear)?;
    let mut encoder = Mlp::init(enc_arch, &mut stream)?;
    let mut decoder = Mlp::init(dec_arch, &mut stream)?;
    config.adam.validate()?;
    let mut enc_opt = AdamState::new(encoder.num_params(), config.adam);
    let mut dec_opt = AdamState::new(decoder.num_params(), config.adam);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let batch = config.batch_size.max(1);
    for _ in 0..config.epochs {
        rng::shuffle(&mut stream, &mut order);
        for chunk in order.chunks(batch) {
            let x: Vec<f64> = chunk.iter().flat_map(|&i| train[i].iter().copied()).collect();
            let n = chunk.len();
            let enc_cache = encoder.forward_cached(&x, n)?;
            let dec_cache = decoder.forward_cached(enc_cache.output(), n)?;
            let scale = 2.0 / n as f64;
            let d_out: Vec<f64> = dec_cache.output().iter().zip(&x).map(|(y, t)| scale * (y - t)).collect();
            let mut g_dec = vec![0.0; decoder.num_params()];
            let d_latent = decoder.backward(&dec_cache, &d_out, Some(&mut g_dec))?;
            let mut g_enc = vec![0.0; encoder.num_params()];
            encoder.backward(&enc_cache, &d_latent, Some(&mut g_enc))?;
            dec_opt.step(decoder.values_mut(), &g_dec)?;
            enc_opt.step(encoder.values_mut(), &g_enc)?;
        }
    }

    // standardize the latent code so the N(0, I) prior matches the data
    let flat: Vec<f64> = train.iter().flat_map(|s| s.iter().copied()).collect();
    let codes = encoder.forward_batch(&flat, train.len())?;
    let mut mean = vec![0.0; latent];
    let mut var = vec![0.0; latent];
    for row in codes.chunks(latent) {
        add_into(&mut mean, row);
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    for row in codes.chunks(latent) {
        for j in 0..latent {
            var[j] += (row[j] - mean[j]) * (row[j] - mean[j]);
        }
    }
    let std: Vec<f64> = var.iter().map(|v| math::sqrt(v / train.len() as f64).max(1e-8)).collect();
    standardize_encoder_output(&mut encoder, &mean, &std);
    standardize_decoder_input(&mut decoder, &mean, &std);

    let mut report = FitReport { holdout_count: held.len(), holdout_rmse: None };
    if !held.is_empty() {
        let flat: Vec<f64> = held.iter().flat_map(|s| s.iter().copied()).collect();
        let codes = encoder.forward_batch(&flat, held.len())?;
        let recon = decoder.forward_batch(&codes, held.len())?;
        let mse: f64 = recon.iter().zip(&flat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / flat.len() as f64;
        report.holdout_rmse = Some(math::sqrt(mse));
    }
    Ok((GenerativeModel::Class(ClassModel { encoder, decoder }), report))
}

/// Rewrites the last encoder layer so it emits `(u - mean) / std`.
fn standardize_encoder_output(encoder: &mut Mlp, mean: &[f64], std: &[f64]) {
    let sizes = encoder.arch().sizes.clone();
    let l = sizes.len() - 2;
    let (i, o) = (sizes[l], sizes[l + 1]);
    let segs = encoder.params().segments().to_vec();
    let (w, b) = (segs[2 * l].offset, segs[2 * l + 1].offset);
    let v = encoder.values_mut();
    for r in 0..o {
        for c in 0..i {
            v[w + r * i + c] /= std[r];
        }
        v[b + r] = (v[b + r] - mean[r]) / std[r];
    }
}

/// Rewrites the first decoder layer so it accepts standardized codes.
fn standardize_decoder_input(decoder: &mut Mlp, mean: &[f64], std: &[f64]) {
    let sizes = decoder.arch().sizes.clone();
    let (i, o) = (sizes[0], sizes[1]);
    let segs = decoder.params().segments().to_vec();
    let (w, b) = (segs[0].offset, segs[1].offset);
    let v = decoder.values_mut();
    for r in 0..o {
        let mut shift = 0.0;
        for c in 0..i {
            shift += v[w + r * i + c] * mean[c];
            v[w + r * i + c] *= std[c];
        }
        v[b + r] += shift;
    }
}

/// Off-policy data collection with a uniform-random policy.
///
/// Navigation rolls out `horizon` steps from the start of `split` with actions
/// uniform in the speed disc. The classification domain is single-step and
/// only accepts `horizon = 0`.
pub fn sample_rollout(domain: &Domain, split: Split, horizon: usize, stream: &mut Stream) -> Result<Trajectory> {
    match domain {
        Domain::Nav(world) => {
            let mut s = world.initial_state(split);
            let mut states = Vec::with_capacity(horizon + 1);
            let mut actions = Vec::with_capacity(horizon);
            states.push(s.to_vec());
            for _ in 0..horizon {
                let a = rng::uniform_disc(stream, world.max_speed);
                s = world.step(s, a, stream);
                actions.push(a.to_vec());
                states.push(s.to_vec());
            }
            Trajectory::new(states, actions)
        }
        Domain::Class(world) => {
            if horizon != 0 {
                return Err(config_err!("the classification domain is single-step; horizon must be 0"));
            }
            Ok(Trajectory::single(world.sample_initial(split, stream).observation))
        }
    }
}
