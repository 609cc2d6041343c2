//! Randomized invariants over the public API.

use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;

use crate::acquisition::{evaluate, AfContext, AfTag, Acquisition, NoveltyPairing, NoveltySet};
use crate::env::nav2d::NAV_REWARDS;
use crate::generative::{ClassModel, GenerativeModel, NavModel};
use crate::math;
use crate::mpc::{plan_objective, PlanContext};
use crate::numerics::{Activation, Arch, Head, Mlp};
use crate::reward_model::{Featurizer, RewardEnsemble, RewardModel};
use crate::rng;
use crate::synthesis::{decision_len, objective, synthesize, Bounds, Solver, StartPolicy, SynthesisContext, SynthesisProblem};

fn nav(sigma: f64) -> GenerativeModel {
    GenerativeModel::Nav(NavModel { start: [0.0, 0.0], sigma })
}

fn ensemble(seed: u64, input: usize, scale: f64, featurizer: Featurizer) -> RewardEnsemble {
    let arch = Arch::with_hidden(input, &[8, 8], 3, Activation::Tanh, Head::Softmax).unwrap();
    let e = RewardEnsemble::init(&arch, 4, NAV_REWARDS.to_vec(), featurizer, seed).unwrap();
    let members = e
        .members()
        .iter()
        .map(|m| {
            let mut m = m.clone();
            m.values_mut().iter_mut().for_each(|v| *v *= scale);
            m
        })
        .collect();
    RewardEnsemble::new(members, NAV_REWARDS.to_vec(), featurizer).unwrap()
}

fn autoencoder(seed: u64, obs: usize) -> GenerativeModel {
    let enc = Arch::with_hidden(obs, &[6], 2, Activation::Tanh, Head::Linear).unwrap();
    let dec = Arch::with_hidden(2, &[6], obs, Activation::Tanh, Head::Linear).unwrap();
    GenerativeModel::Class(ClassModel {
        encoder: Mlp::init(enc, &mut rng::substream(seed, 0)).unwrap(),
        decoder: Mlp::init(dec, &mut rng::substream(seed, 1)).unwrap(),
    })
}

fn close(fd: f64, an: f64, floor: f64) -> bool {
    (fd - an).abs() <= 1e-4 * fd.abs().max(floor)
}

fn point() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..1.0f64, 2)
}

fn trajectory(max_len: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(point(), 1..=max_len)
}

fn tag() -> impl Strategy<Value = AfTag> {
    prop::sample::select(AfTag::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-800.0..800.0f64, 1..12)) {
        let mut p = vec![0.0; logits.len()];
        math::softmax_into(&logits, &mut p);
        prop_assert!(p.iter().all(|x| (0.0..=1.0).contains(x)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(math::argmax(&p), math::argmax(&logits));
    }

    #[test]
    fn log_sum_exp_bounds_the_max(xs in prop::collection::vec(-500.0..500.0f64, 1..12)) {
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let l = math::log_sum_exp(&xs);
        prop_assert!(l >= m && l <= m + (xs.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn disagreement_is_nonnegative(seed in 0u64..1000, scale in 0.1..5.0f64, xs in prop::collection::vec(-2.0..2.0f64, 2..40)) {
        let e = ensemble(seed, 2, scale, Featurizer::NextState);
        let n = xs.len() / 2;
        let d = e.disagreement_batch(&xs[..2 * n], n).unwrap();
        prop_assert!(d.iter().all(|v| *v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn identical_members_never_disagree(seed in 0u64..1000, x in point()) {
        let e = ensemble(seed, 2, 3.0, Featurizer::NextState);
        let m = e.members()[0].clone();
        let same = RewardEnsemble::new(vec![m.clone(), m.clone(), m], NAV_REWARDS.to_vec(), Featurizer::NextState).unwrap();
        prop_assert_eq!(same.disagreement(&x).unwrap(), 0.0);
    }

    #[test]
    fn class_probabilities_sum_to_one(seed in 0u64..1000, x in point()) {
        let e = ensemble(seed, 2, 4.0, Featurizer::NextState);
        let p = e.class_probs(&x).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let r = e.reward(&x).unwrap();
        prop_assert!((NAV_REWARDS[1]..=NAV_REWARDS[0]).contains(&r));
    }

    #[test]
    fn reward_terms_are_exact_negations(seed in 0u64..1000, tau in trajectory(5)) {
        let e = ensemble(seed, 2, 3.0, Featurizer::NextState);
        let g = nav(0.01);
        let empty = NoveltySet::new(2);
        let ctx = AfContext { reward: &e, generative: &g, novelty: &empty, pairing: NoveltyPairing::AllPairs };
        let p = evaluate(&Acquisition::single(AfTag::RewardMax), &ctx, &tau).unwrap();
        let m = evaluate(&Acquisition::single(AfTag::RewardMin), &ctx, &tau).unwrap();
        prop_assert_eq!(p.value, -m.value);
        for (a, b) in p.d_states.iter().flatten().zip(m.d_states.iter().flatten()) {
            prop_assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn acquisition_gradients_match_finite_differences(
        seed in 0u64..1000,
        tag in tag(),
        tau in trajectory(4),
        labeled in prop::collection::vec(trajectory(3), 1..4),
        aligned in any::<bool>(),
    ) {
        let e = ensemble(seed, 2, 3.0, Featurizer::NextState);
        let g = nav(0.01);
        let mut set = NoveltySet::new(2);
        for t in &labeled {
            set.push(t);
        }
        let pairing = if aligned { NoveltyPairing::TimeAligned } else { NoveltyPairing::AllPairs };
        let ctx = AfContext { reward: &e, generative: &g, novelty: &set, pairing };
        let acq = Acquisition::single(tag);
        let v = evaluate(&acq, &ctx, &tau).unwrap();
        let h = 1e-6;
        for i in 0..tau.len() {
            for j in 0..2 {
                let mut up = tau.clone();
                up[i][j] += h;
                let mut dn = tau.clone();
                dn[i][j] -= h;
                let fd = (evaluate(&acq, &ctx, &up).unwrap().value - evaluate(&acq, &ctx, &dn).unwrap().value) / (2.0 * h);
                prop_assert!(close(fd, v.d_states[i][j], 1e-3), "{:?} state {} dim {}: {} vs {}", tag, i, j, fd, v.d_states[i][j]);
            }
        }
    }

    #[test]
    fn latent_acquisition_gradients_match_finite_differences(seed in 0u64..1000, x in prop::collection::vec(-1.5..1.5f64, 4)) {
        let g = autoencoder(seed, 4);
        let e = ensemble(seed + 1, 2, 2.0, Featurizer::Latent);
        let mut set = NoveltySet::new(2);
        set.push(&[g.encode(&[0.3, -0.2, 0.5, 0.1]).unwrap()]);
        let ctx = AfContext { reward: &e, generative: &g, novelty: &set, pairing: NoveltyPairing::AllPairs };
        let acq = Acquisition::hybrid(vec![(AfTag::Uncertainty, 1.0), (AfTag::Novelty, 0.5)]).unwrap();
        let tau = vec![x];
        let v = evaluate(&acq, &ctx, &tau).unwrap();
        let h = 1e-6;
        for j in 0..4 {
            let mut up = tau.clone();
            up[0][j] += h;
            let mut dn = tau.clone();
            dn[0][j] -= h;
            let fd = (evaluate(&acq, &ctx, &up).unwrap().value - evaluate(&acq, &ctx, &dn).unwrap().value) / (2.0 * h);
            prop_assert!(close(fd, v.d_states[0][j], 1e-3), "dim {}: {} vs {}", j, fd, v.d_states[0][j]);
        }
    }

    #[test]
    fn synthesis_objective_gradients_match_finite_differences(
        seed in 0u64..1000,
        tag in tag(),
        lambda in prop::sample::select(vec![0.0, 0.1, 1.0, f64::INFINITY]),
        horizon in 1usize..4,
        optimize_start in any::<bool>(),
    ) {
        let e = ensemble(seed, 2, 3.0, Featurizer::NextState);
        let g = nav(0.05);
        let mut set = NoveltySet::new(2);
        set.push(&[vec![0.0, 0.0], vec![0.3, 0.1]]);
        let ctx = SynthesisContext { af: AfContext { reward: &e, generative: &g, novelty: &set, pairing: NoveltyPairing::AllPairs } };
        let solver = if lambda.is_infinite() { Solver::Shooting } else { Solver::Collocation { lambda } };
        let start = if optimize_start { StartPolicy::Optimize } else { StartPolicy::Clamp };
        let p = SynthesisProblem { start, ..SynthesisProblem::new(Acquisition::single(tag), solver, horizon, StartPolicy::Clamp) };
        let n = decision_len(&p, &g);
        let mut s = rng::stream(seed);
        let vars: Vec<f64> = (0..n).map(|_| rng::uniform(&mut s, 0.05, 0.4)).collect();
        let fixed = [0.1, 0.05];
        let v = objective(&p, &ctx, &vars, &fixed).unwrap();
        let h = 1e-6;
        for i in 0..n {
            let mut up = vars.clone();
            up[i] += h;
            let mut dn = vars.clone();
            dn[i] -= h;
            let fd = (objective(&p, &ctx, &up, &fixed).unwrap().value - objective(&p, &ctx, &dn, &fixed).unwrap().value) / (2.0 * h);
            prop_assert!(close(fd, v.grad[i], 1e-2), "{:?} {:?} var {}: {} vs {}", tag, solver, i, fd, v.grad[i]);
        }
    }

    #[test]
    fn planning_gradients_match_finite_differences(seed in 0u64..1000, s in point(), steps in 1usize..8) {
        let e = ensemble(seed, 2, 3.0, Featurizer::NextState);
        let g = nav(0.001);
        let ctx = PlanContext { reward: &e, model: &g, max_speed: 0.01 };
        let mut st = rng::stream(seed);
        let actions: Vec<Vec<f64>> = (0..steps).map(|_| rng::uniform_disc(&mut st, 0.05).to_vec()).collect();
        let (_, grad) = plan_objective(&ctx, &s, &actions).unwrap();
        let h = 1e-6;
        for t in 0..steps {
            for j in 0..2 {
                let mut up = actions.clone();
                up[t][j] += h;
                let mut dn = actions.clone();
                dn[t][j] -= h;
                let fd = (plan_objective(&ctx, &s, &up).unwrap().0 - plan_objective(&ctx, &s, &dn).unwrap().0) / (2.0 * h);
                prop_assert!(close(fd, grad[t][j], 1e-3), "step {} dim {}: {} vs {}", t, j, fd, grad[t][j]);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn shooting_queries_follow_the_dynamics_exactly(seed in 0u64..1000, tag in tag(), horizon in 1usize..5) {
        let e = ensemble(seed, 2, 3.0, Featurizer::NextState);
        let g = nav(0.001);
        let mut set = NoveltySet::new(2);
        set.push(&[vec![0.5, 0.5]]);
        let ctx = SynthesisContext { af: AfContext { reward: &e, generative: &g, novelty: &set, pairing: NoveltyPairing::AllPairs } };
        let p = SynthesisProblem {
            iterations: 30,
            restarts: 2,
            bounds: Bounds { latent_box: Some((0.0, 1.0)), max_speed: Some(0.01) },
            ..SynthesisProblem::new(Acquisition::single(tag), Solver::Shooting, horizon, StartPolicy::Clamp)
        };
        let q = synthesize(&p, &ctx, seed).unwrap();
        let t = &q.trajectory;
        prop_assert_eq!(t.horizon(), horizon);
        for i in 0..horizon {
            prop_assert!(math::norm(&t.actions[i]) <= 0.01 + 1e-15);
            let residual = math::dist(&g.dynamics_mean(&t.states[i], &t.actions[i]).unwrap(), &t.states[i + 1]);
            prop_assert_eq!(residual, 0.0);
        }
    }

    #[test]
    fn synthesis_is_reproducible(seed in 0u64..1000, tag in tag(), lambda in prop::sample::select(vec![0.0, 1.0, f64::INFINITY])) {
        let e = ensemble(seed, 2, 3.0, Featurizer::NextState);
        let g = nav(0.001);
        let mut set = NoveltySet::new(2);
        set.push(&[vec![0.5, 0.5]]);
        let ctx = SynthesisContext { af: AfContext { reward: &e, generative: &g, novelty: &set, pairing: NoveltyPairing::AllPairs } };
        let solver = if lambda.is_infinite() { Solver::Shooting } else { Solver::Collocation { lambda } };
        let p = SynthesisProblem { iterations: 20, restarts: 2, ..SynthesisProblem::new(Acquisition::single(tag), solver, 2, StartPolicy::Clamp) };
        let a = synthesize(&p, &ctx, seed).unwrap();
        let b = synthesize(&p, &ctx, seed).unwrap();
        prop_assert_eq!(a, b);
    }
}
