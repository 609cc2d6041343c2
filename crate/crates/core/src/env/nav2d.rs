//! Point-mass navigation in the unit square with one goal disc and one trap disc.

use crate::error::{config_err, Result};
use crate::math;
use crate::rng::{self, Stream};

use super::Split;

pub type Point = [f64; 2];

/// Class labels of the navigation task, in tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "lowercase"))]
pub enum NavClass {
    Good = 0,
    Unsafe = 1,
    Neutral = 2,
}

impl NavClass {
    pub const ALL: [NavClass; 3] = [NavClass::Good, NavClass::Unsafe, NavClass::Neutral];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            NavClass::Good => "good",
            NavClass::Unsafe => "unsafe",
            NavClass::Neutral => "neutral",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

/// Reward constants `(R_good, R_unsafe, R_neutral)` of the navigation task.
pub const NAV_REWARDS: [f64; 3] = [1.0, -10.0, 0.0];

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default))]
pub struct NavWorld {
    pub goal_center: Point,
    pub goal_radius: f64,
    pub trap_center: Point,
    pub trap_radius: f64,
    pub max_speed: f64,
    pub episode_cap: usize,
    pub noise_sigma: f64,
}

impl Default for NavWorld {
    fn default() -> Self {
        Self {
            goal_center: [0.25, 0.25],
            goal_radius: 0.10,
            trap_center: [0.65, 0.65],
            trap_radius: 0.15,
            max_speed: 0.01,
            episode_cap: 1000,
            noise_sigma: 0.001,
        }
    }
}

fn disc_inside_unit_square(c: Point, r: f64) -> bool {
    c[0] - r >= 0.0 && c[0] + r <= 1.0 && c[1] - r >= 0.0 && c[1] + r <= 1.0
}

impl NavWorld {
    pub fn validate(&self) -> Result<()> {
        if !(self.goal_radius > 0.0 && self.trap_radius > 0.0) {
            return Err(config_err!("goal and trap radii must be positive"));
        }
        if !(self.max_speed > 0.0) {
            return Err(config_err!("max speed must be positive, got {}", self.max_speed));
        }
        if self.episode_cap == 0 {
            return Err(config_err!("episode cap must be positive"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(config_err!("dynamics noise must be nonnegative"));
        }
        if !disc_inside_unit_square(self.goal_center, self.goal_radius)
            || !disc_inside_unit_square(self.trap_center, self.trap_radius)
        {
            return Err(config_err!("goal and trap discs must lie inside the unit square"));
        }
        if math::dist(&self.goal_center, &self.trap_center) <= self.goal_radius + self.trap_radius {
            return Err(config_err!("goal and trap discs overlap"));
        }
        Ok(())
    }

    pub fn initial_state(&self, split: Split) -> Point {
        match split {
            Split::Train | Split::All => [0.0, 0.0],
            Split::Test => [1.0, 1.0],
        }
    }

    /// Rescales `a` onto the speed bound if it exceeds it.
    pub fn clip_action(&self, a: Point) -> Point {
        let n = math::norm(&a);
        if n > self.max_speed {
            let k = self.max_speed / n;
            [a[0] * k, a[1] * k]
        } else {
            a
        }
    }

    /// Noiseless transition `s + clip(a)`.
    pub fn mean_next(&self, s: Point, a: Point) -> Point {
        let a = self.clip_action(a);
        [s[0] + a[0], s[1] + a[1]]
    }

    /// Samples `s' ~ N(s + clip(a), σ²I)`.
    pub fn step(&self, s: Point, a: Point, stream: &mut Stream) -> Point {
        let m = self.mean_next(s, a);
        if self.noise_sigma == 0.0 {
            return m;
        }
        [m[0] + self.noise_sigma * rng::normal(stream), m[1] + self.noise_sigma * rng::normal(stream)]
    }

    pub fn in_goal(&self, s: &[f64]) -> bool {
        math::dist(s, &self.goal_center) <= self.goal_radius
    }

    pub fn in_trap(&self, s: &[f64]) -> bool {
        math::dist(s, &self.trap_center) <= self.trap_radius
    }

    /// The simulated user's label; only the next state matters.
    pub fn oracle_label(&self, _s: &[f64], _a: &[f64], next: &[f64]) -> NavClass {
        if self.in_goal(next) {
            NavClass::Good
        } else if self.in_trap(next) {
            NavClass::Unsafe
        } else {
            NavClass::Neutral
        }
    }

    /// True reward of reaching `next` under the task's class constants.
    pub fn true_reward(&self, next: &[f64]) -> f64 {
        NAV_REWARDS[self.oracle_label(&[], &[], next).index()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn noiseless_step_is_mean() {
        let w = NavWorld { noise_sigma: 0.0, ..Default::default() };
        let mut s = stream(0);
        assert_eq!(w.step([0.0, 0.0], [0.01, 0.0], &mut s), [0.01, 0.0]);
    }

    #[test]
    fn oversized_action_is_rescaled() {
        let w = NavWorld { noise_sigma: 0.0, ..Default::default() };
        let a = w.clip_action([0.03, 0.04]);
        assert!((math::norm(&a) - 0.01).abs() < 1e-15);
        assert!((a[0] - 0.006).abs() < 1e-15 && (a[1] - 0.008).abs() < 1e-15);
        let next = w.step([0.5, 0.5], [0.03, 0.04], &mut stream(1));
        assert!((math::dist(&next, &[0.5, 0.5]) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn noisy_step_mean_is_unbiased() {
        let w = NavWorld::default();
        let mut s = stream(9);
        let n = 10_000;
        let (mut sx, mut sy) = (0.0, 0.0);
        for _ in 0..n {
            let p = w.step([0.3, 0.4], [0.005, -0.005], &mut s);
            sx += p[0];
            sy += p[1];
        }
        let tol = 3.0 * w.noise_sigma / (n as f64).sqrt();
        assert!((sx / n as f64 - 0.305).abs() < tol);
        assert!((sy / n as f64 - 0.395).abs() < tol);
    }

    #[test]
    fn initial_states_are_corner_deltas() {
        let w = NavWorld::default();
        assert_eq!(w.initial_state(Split::Train), [0.0, 0.0]);
        assert_eq!(w.initial_state(Split::Test), [1.0, 1.0]);
        assert_eq!(w.initial_state(Split::Test), w.initial_state(Split::Test));
    }

    #[test]
    fn oracle_labels() {
        let w = NavWorld::default();
        assert_eq!(w.oracle_label(&[0.0; 2], &[0.0; 2], &w.goal_center), NavClass::Good);
        assert_eq!(w.oracle_label(&[0.0; 2], &[0.0; 2], &w.trap_center), NavClass::Unsafe);
        assert_eq!(w.oracle_label(&[0.0; 2], &[0.0; 2], &[0.0, 0.0]), NavClass::Neutral);
        // disc membership is inclusive of the boundary
        assert_eq!(w.oracle_label(&[], &[], &[0.35, 0.25]), NavClass::Good);
        assert_eq!(w.oracle_label(&[], &[], &[0.3501, 0.25]), NavClass::Neutral);
        // label ignores s and a
        assert_eq!(w.oracle_label(&[0.9, 0.9], &[1.0, 1.0], &w.goal_center), NavClass::Good);
    }

    #[test]
    fn default_geometry_is_valid_and_overlap_rejected() {
        assert!(NavWorld::default().validate().is_ok());
        let bad = NavWorld { trap_center: [0.35, 0.35], ..Default::default() };
        assert!(bad.validate().is_err());
        let outside = NavWorld { goal_center: [0.05, 0.5], ..Default::default() };
        assert!(outside.validate().is_err());
    }

    #[test]
    fn noiseless_steps_compose_additively() {
        let w = NavWorld { noise_sigma: 0.0, ..Default::default() };
        let mut s = stream(0);
        let two = w.step(w.step([0.2, 0.3], [0.003, 0.001], &mut s), [0.002, -0.004], &mut s);
        let once = w.step([0.2, 0.3], [0.005, -0.003], &mut s);
        assert!(math::dist(&two, &once) < 1e-15);
    }
}
