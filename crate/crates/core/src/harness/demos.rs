//! Scripted controllers: the suboptimal demonstrator that seeds the dataset and
//! the trap-avoiding expert used to build evaluation sets.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::env::gaussclass::ClassWorld;
use crate::env::nav2d::{NavWorld, Point};
use crate::env::Split;
use crate::error::{config_err, Result};
use crate::generative::Trajectory;
use crate::math;
use crate::reward_model::LabeledTransition;
use crate::rng::{self, Stream};

pub const DEMO_SOURCE: &str = "demo";

/// A demonstration trajectory with its per-transition labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub trajectory: Trajectory,
    pub labels: Vec<usize>,
}

impl Demonstration {
    /// Labeled transitions tagged as demonstrations of trajectory `id`.
    pub fn transitions(&self, id: u64) -> Vec<LabeledTransition> {
        self.trajectory
            .transitions()
            .iter()
            .zip(&self.labels)
            .map(|(t, &class)| LabeledTransition {
                s: t.state.to_vec(),
                a: t.action.to_vec(),
                s_next: t.next_state.to_vec(),
                class,
                source: String::from(DEMO_SOURCE),
                round: 0,
                trajectory: id,
            })
            .collect()
    }
}

fn unit_toward(from: Point, to: Point) -> Point {
    let d = [to[0] - from[0], to[1] - from[1]];
    let n = math::norm(&d);
    if n == 0.0 {
        [0.0, 0.0]
    } else {
        [d[0] / n, d[1] / n]
    }
}

fn rotate(v: Point, angle: f64) -> Point {
    let (s, c) = (math::sin(angle), math::cos(angle));
    [v[0] * c - v[1] * s, v[0] * s + v[1] * c]
}

/// Full-speed step toward the goal with Gaussian heading noise. Steps whose
/// mean would enter the trap fall back to the noiseless heading.
pub fn demonstrator_action(world: &NavWorld, s: Point, heading_noise: f64, stream: &mut Stream) -> Point {
    let dir = unit_toward(s, world.goal_center);
    let noisy = rotate(dir, heading_noise * rng::normal(stream));
    let a = [noisy[0] * world.max_speed, noisy[1] * world.max_speed];
    if world.in_trap(&world.mean_next(s, a)) {
        [dir[0] * world.max_speed, dir[1] * world.max_speed]
    } else {
        a
    }
}

/// Goal-seeking with a tangential detour around the trap.
pub fn expert_action(world: &NavWorld, s: Point) -> Point {
    let goal = unit_toward(s, world.goal_center);
    let margin = 0.1;
    let d = math::dist(&s, &world.trap_center);
    let mut dir = goal;
    if d < world.trap_radius + margin {
        let away = unit_toward(world.trap_center, s);
        let mut tangent = [-away[1], away[0]];
        if math::dot(&tangent, &goal) < 0.0 {
            tangent = [-tangent[0], -tangent[1]];
        }
        let w = 2.0 * ((world.trap_radius + margin - d) / margin).clamp(0.0, 1.0);
        dir = unit_toward([0.0, 0.0], [goal[0] + w * (away[0] + tangent[0]), goal[1] + w * (away[1] + tangent[1])]);
    }
    let a = [dir[0] * world.max_speed, dir[1] * world.max_speed];
    if world.in_trap(&world.mean_next(s, a)) {
        let away = unit_toward(world.trap_center, s);
        return [away[0] * world.max_speed, away[1] * world.max_speed];
    }
    a
}

/// Runs a controller from `start` until the goal, the trap, or the episode cap.
pub fn rollout_controller(
    world: &NavWorld,
    start: Point,
    stream: &mut Stream,
    mut policy: impl FnMut(Point, &mut Stream) -> Point,
) -> Result<Trajectory> {
    let mut s = start;
    let mut states = vec![s.to_vec()];
    let mut actions = Vec::new();
    while actions.len() < world.episode_cap {
        let a = world.clip_action(policy(s, stream));
        s = world.step(s, a, stream);
        actions.push(a.to_vec());
        states.push(s.to_vec());
        if world.in_goal(&s) || world.in_trap(&s) {
            break;
        }
    }
    Trajectory::new(states, actions)
}

/// One noisy demonstration from the training start.
pub fn nav_demonstration(world: &NavWorld, heading_noise: f64, stream: &mut Stream) -> Result<Demonstration> {
    let start = world.initial_state(Split::Train);
    let trajectory = rollout_controller(world, start, stream, |s, st| demonstrator_action(world, s, heading_noise, st))?;
    let labels = trajectory.transitions().iter().map(|t| world.oracle_label(t.state, t.action, t.next_state).index()).collect();
    Ok(Demonstration { trajectory, labels })
}

/// `count` single-sample demonstrations from the training split with true labels.
pub fn class_demonstrations(world: &ClassWorld, count: usize, stream: &mut Stream) -> Vec<Demonstration> {
    (0..count)
        .map(|_| {
            let s = world.sample_initial(Split::Train, stream);
            Demonstration { trajectory: Trajectory::single(s.observation), labels: vec![s.class] }
        })
        .collect()
}

pub fn nav_demonstrations(world: &NavWorld, count: usize, heading_noise: f64, stream: &mut Stream) -> Result<Vec<Demonstration>> {
    if count == 0 {
        return Err(config_err!("at least one demonstration is required"));
    }
    (0..count).map(|_| nav_demonstration(world, heading_noise, stream)).collect()
}

/// Mean episode length of the demonstrator over `episodes` fresh runs.
pub fn demonstrator_mean_length(world: &NavWorld, heading_noise: f64, episodes: usize, stream: &mut Stream) -> Result<f64> {
    if episodes == 0 {
        return Err(config_err!("need at least one reference episode"));
    }
    let mut total = 0usize;
    for _ in 0..episodes {
        total += nav_demonstration(world, heading_noise, stream)?.trajectory.horizon();
    }
    Ok(total as f64 / episodes as f64)
}
