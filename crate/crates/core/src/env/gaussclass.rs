//! A single-step classification domain with a hidden two-dimensional latent
//! structure, standing in for digit classification under a class split.
//!
//! Ten classes sit on a circle in latent space; observations are a fixed
//! smooth injective map of the latent. Training draws only classes 5..9,
//! testing only 0..4.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, Error, Result};
use crate::math;
use crate::rng::{self, Stream};

use super::Split;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default))]
pub struct ClassWorldConfig {
    pub num_classes: usize,
    pub obs_dim: usize,
    pub mean_radius: f64,
    pub class_sigma: f64,
    /// Seed of the latent → observation map.
    pub map_seed: u64,
}

impl Default for ClassWorldConfig {
    fn default() -> Self {
        Self { num_classes: 10, obs_dim: 16, mean_radius: 2.0, class_sigma: 0.35, map_seed: 0x5eed_c1a5 }
    }
}

pub const LATENT_DIM: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSample {
    pub observation: Vec<f64>,
    pub latent: [f64; 2],
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassWorld {
    config: ClassWorldConfig,
    means: Vec<[f64; 2]>,
    map_weight: Vec<f64>,
    map_bias: Vec<f64>,
}

impl ClassWorld {
    pub fn new(config: ClassWorldConfig) -> Result<Self> {
        if config.num_classes < 2 || config.num_classes % 2 != 0 {
            return Err(config_err!("class world needs an even number of classes ≥ 2"));
        }
        if config.obs_dim < LATENT_DIM {
            return Err(config_err!("observation dimension must be at least the latent dimension"));
        }
        if !(config.class_sigma > 0.0 && config.mean_radius > 0.0) {
            return Err(config_err!("class spread and mean radius must be positive"));
        }
        let k = config.num_classes;
        let means = (0..k)
            .map(|c| {
                let t = core::f64::consts::TAU * c as f64 / k as f64;
                [config.mean_radius * math::cos(t), config.mean_radius * math::sin(t)]
            })
            .collect();
        let mut s = rng::stream(config.map_seed);
        let map_weight = (0..config.obs_dim * LATENT_DIM).map(|_| 0.5 * rng::normal(&mut s)).collect();
        let map_bias = (0..config.obs_dim).map(|_| 0.25 * rng::normal(&mut s)).collect();
        Ok(Self { config, means, map_weight, map_bias })
    }

    pub fn config(&self) -> &ClassWorldConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn obs_dim(&self) -> usize {
        self.config.obs_dim
    }

    pub fn class_mean(&self, class: usize) -> [f64; 2] {
        self.means[class]
    }

    /// Classes the initial-state distribution of `split` draws from.
    pub fn split_classes(&self, split: Split) -> core::ops::Range<usize> {
        let half = self.config.num_classes / 2;
        match split {
            Split::Train => half..self.config.num_classes,
            Split::Test => 0..half,
            Split::All => 0..self.config.num_classes,
        }
    }

    /// The fixed observation map `tanh(W z + b)`.
    pub fn decode(&self, latent: &[f64]) -> Vec<f64> {
        self.map_bias
            .iter()
            .zip(self.map_weight.chunks(LATENT_DIM))
            .map(|(b, w)| math::tanh(b + math::dot(w, latent)))
            .collect()
    }

    pub fn sample_in_class(&self, class: usize, stream: &mut Stream) -> ClassSample {
        let m = self.means[class];
        let sigma = self.config.class_sigma;
        let latent = [m[0] + sigma * rng::normal(stream), m[1] + sigma * rng::normal(stream)];
        ClassSample { observation: self.decode(&latent), latent, class }
    }

    pub fn sample_initial(&self, split: Split, stream: &mut Stream) -> ClassSample {
        let classes = self.split_classes(split);
        let class = classes.start + rng::below(stream, classes.len());
        self.sample_in_class(class, stream)
    }

    /// Recovers the latent of an observation by least squares on `atanh(x) - b`.
    pub fn invert(&self, observation: &[f64]) -> [f64; 2] {
        let (mut a, mut b, mut d) = (0.0, 0.0, 0.0);
        let (mut r0, mut r1) = (0.0, 0.0);
        for ((w, bias), &x) in self.map_weight.chunks(LATENT_DIM).zip(&self.map_bias).zip(observation) {
            let y = libm::atanh(x.clamp(-1.0 + 1e-15, 1.0 - 1e-15)) - bias;
            a += w[0] * w[0];
            b += w[0] * w[1];
            d += w[1] * w[1];
            r0 += w[0] * y;
            r1 += w[1] * y;
        }
        let det = a * d - b * b;
        [(d * r0 - b * r1) / det, (a * r1 - b * r0) / det]
    }

    /// Nearest class mean in latent space, the generative ground truth.
    pub fn nearest_mean_class(&self, latent: &[f64]) -> usize {
        let d: Vec<f64> = self.means.iter().map(|m| -math::dist(m, latent)).collect();
        math::argmax(&d)
    }
}

/// A k-nearest-neighbor simulated user over a labeled observation pool.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnOracle {
    dim: usize,
    observations: Vec<f64>,
    classes: Vec<usize>,
    num_classes: usize,
    pub k: usize,
}

impl KnnOracle {
    pub fn new(dim: usize, observations: Vec<f64>, classes: Vec<usize>, num_classes: usize, k: usize) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Precondition("kNN pool must be nonempty".into()));
        }
        if k == 0 {
            return Err(Error::Precondition("kNN needs k ≥ 1".into()));
        }
        if observations.len() != dim * classes.len() {
            return Err(crate::error::shape_err!("pool holds {} values for {} samples of width {}", observations.len(), classes.len(), dim));
        }
        if classes.iter().any(|&c| c >= num_classes) {
            return Err(config_err!("pool class out of range"));
        }
        Ok(Self { dim, observations, classes, num_classes, k })
    }

    /// A pool of `size` samples drawn from every class of `world`.
    pub fn from_world(world: &ClassWorld, size: usize, k: usize, stream: &mut Stream) -> Result<Self> {
        let mut obs = Vec::with_capacity(size * world.obs_dim());
        let mut classes = Vec::with_capacity(size);
        for _ in 0..size {
            let s = world.sample_initial(Split::All, stream);
            obs.extend_from_slice(&s.observation);
            classes.push(s.class);
        }
        Self::new(world.obs_dim(), obs, classes, world.num_classes(), k)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Majority class among the `k` nearest pool observations; vote ties go to the smallest class.
    pub fn label(&self, query: &[f64]) -> Result<usize> {
        knn_vote(&self.observations, &self.classes, self.dim, self.num_classes, query, self.k)
    }
}

/// Free-function form of [`KnnOracle::label`] over a borrowed pool.
pub fn knn_vote(pool: &[f64], classes: &[usize], dim: usize, num_classes: usize, query: &[f64], k: usize) -> Result<usize> {
    if classes.is_empty() {
        return Err(Error::Precondition("kNN pool must be nonempty".into()));
    }
    if k == 0 || query.len() != dim {
        return Err(Error::Precondition("kNN needs k ≥ 1 and a query of the pool's width".into()));
    }
    let k = k.min(classes.len());
    // (squared distance, class) of the current k nearest, kept sorted
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (row, &c) in pool.chunks(dim).zip(classes) {
        let d: f64 = row.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.len() < k || (d, c) < best[k - 1] {
            let pos = best.partition_point(|e| *e <= (d, c));
            best.insert(pos, (d, c));
            best.truncate(k);
        }
    }
    let mut votes = vec![0usize; num_classes];
    for &(_, c) in &best {
        votes[c] += 1;
    }
    let mut winner = 0;
    for (c, &v) in votes.iter().enumerate() {
        if v > votes[winner] {
            winner = c;
        }
    }
    Ok(winner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn splits_draw_their_classes() {
        let w = ClassWorld::new(Default::default()).unwrap();
        let mut s = stream(1);
        for _ in 0..1000 {
            assert!((5..10).contains(&w.sample_initial(Split::Train, &mut s).class));
            assert!((0..5).contains(&w.sample_initial(Split::Test, &mut s).class));
        }
    }

    #[test]
    fn all_split_is_uniform_over_classes() {
        let w = ClassWorld::new(Default::default()).unwrap();
        let mut s = stream(2);
        let n = 10_000;
        let mut counts = [0usize; 10];
        for _ in 0..n {
            counts[w.sample_initial(Split::All, &mut s).class] += 1;
        }
        let tol = 3.0 * (0.1f64 * 0.9 / n as f64).sqrt();
        for c in counts {
            assert!((c as f64 / n as f64 - 0.1).abs() < tol, "{counts:?}");
        }
    }

    #[test]
    fn observation_is_decoded_latent() {
        let w = ClassWorld::new(Default::default()).unwrap();
        let s = w.sample_initial(Split::All, &mut stream(3));
        assert_eq!(s.observation, w.decode(&s.latent));
        assert_eq!(s.observation.len(), 16);
    }

    #[test]
    fn observation_map_is_injective_on_samples() {
        // decoding an observation back to the latent recovers its nearest class
        let w = ClassWorld::new(Default::default()).unwrap();
        let mut s = stream(4);
        let n = 10_000;
        let mut hits = 0;
        let mut truth = 0;
        for _ in 0..n {
            let x = w.sample_initial(Split::All, &mut s);
            let z = w.invert(&x.observation);
            if w.nearest_mean_class(&z) == w.nearest_mean_class(&x.latent) {
                hits += 1;
            }
            if w.nearest_mean_class(&x.latent) == x.class {
                truth += 1;
            }
        }
        assert!(hits as f64 / n as f64 >= 0.99, "{hits}");
        // adjacent clusters overlap a little at this spread
        let acc = truth as f64 / n as f64;
        assert!(acc > 0.85 && acc < 0.99, "{acc}");
    }

    #[test]
    fn knn_singleton_and_exact_match() {
        let o = KnnOracle::new(2, vec![0.5, 0.5], vec![3], 10, 1).unwrap();
        assert_eq!(o.label(&[9.0, -9.0]).unwrap(), 3);
        let o = KnnOracle::new(2, vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0], vec![4, 7, 1], 10, 1).unwrap();
        assert_eq!(o.label(&[1.0, 1.0]).unwrap(), 7);
    }

    #[test]
    fn knn_vote_tie_goes_to_smallest_class() {
        let o = KnnOracle::new(1, vec![-1.0, 1.0], vec![6, 2], 10, 2).unwrap();
        assert_eq!(o.label(&[0.0]).unwrap(), 2);
    }

    #[test]
    fn empty_pool_is_rejected() {
        assert!(matches!(KnnOracle::new(2, vec![], vec![], 10, 5), Err(Error::Precondition(_))));
        assert!(matches!(knn_vote(&[], &[], 2, 10, &[0.0, 0.0], 5), Err(Error::Precondition(_))));
    }

    #[test]
    fn knn_agrees_with_generative_truth_at_means() {
        let w = ClassWorld::new(Default::default()).unwrap();
        let mut s = stream(5);
        let o = KnnOracle::from_world(&w, 500, 5, &mut s).unwrap();
        let hits = (0..10).filter(|&c| o.label(&w.decode(&w.class_mean(c))).unwrap() == c).count();
        assert_eq!(hits, 10);
    }

    #[test]
    fn knn_is_permutation_invariant() {
        let w = ClassWorld::new(Default::default()).unwrap();
        let mut s = stream(6);
        let o = KnnOracle::from_world(&w, 200, 5, &mut s).unwrap();
        let mut idx: Vec<usize> = (0..o.len()).collect();
        rng::shuffle(&mut s, &mut idx);
        let obs: Vec<f64> = idx.iter().flat_map(|&i| o.observations[i * 16..i * 16 + 16].to_vec()).collect();
        let cls: Vec<usize> = idx.iter().map(|&i| o.classes[i]).collect();
        let p = KnnOracle::new(16, obs, cls, 10, 5).unwrap();
        for _ in 0..200 {
            let q = w.sample_initial(Split::All, &mut s).observation;
            assert_eq!(o.label(&q).unwrap(), p.label(&q).unwrap());
        }
    }
}
