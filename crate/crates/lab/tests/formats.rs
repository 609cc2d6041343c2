use proptest::prelude::*;

use querysynth::{params, results};
use querysynth_core::env::nav2d::NAV_REWARDS;
use querysynth_core::generative::{GenerativeModel, NavModel};
use querysynth_core::harness::MetricRecord;
use querysynth_core::numerics::{Activation, Arch, Head, Mlp};
use querysynth_core::reward_model::{Featurizer, RewardEnsemble, RewardModel};

fn metric() -> impl Strategy<Value = Option<f64>> {
    prop_oneof![Just(None), (-1e6..1e6f64).prop_map(Some), Just(Some(0.0)), Just(Some(1.0))]
}

prop_compose! {
    fn record()(labels in 0usize..5000, round in 0usize..2000, m in prop::collection::vec(metric(), 10)) -> MetricRecord {
        MetricRecord {
            labels,
            round,
            success_rate: m[0],
            crash_rate: m[1],
            fpr: m[2],
            tnr: m[3],
            grid_accuracy: m[4],
            accuracy: m[5],
            log_likelihood: m[6],
            true_reward: m[7],
            train_success_rate: m[8],
            train_steps: m[9],
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn curves_round_trip(curve in prop::collection::vec(record(), 0..20)) {
        let mut buf = Vec::new();
        results::write_curve(&mut buf, &curve).unwrap();
        prop_assert_eq!(results::read_curve(buf.as_slice()).unwrap(), curve);
    }

    #[test]
    fn ensembles_round_trip_bit_exactly(values in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::SUBNORMAL, 2 * 27)) {
        let arch = Arch::with_hidden(2, &[4], 3, Activation::Tanh, Head::Softmax).unwrap();
        let members: Vec<Mlp> = values.chunks(27).map(|c| Mlp::from_values(arch.clone(), c.to_vec()).unwrap()).collect();
        let e = RewardEnsemble::new(members, NAV_REWARDS.to_vec(), Featurizer::NextState).unwrap();
        let back = params::read_ensemble(&params::write_ensemble(&e)).unwrap();
        for (a, b) in e.members().iter().zip(back.members()) {
            let same = a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits());
            prop_assert!(same);
        }
        prop_assert_eq!(back.featurizer(), e.featurizer());
    }

    #[test]
    fn nav_models_round_trip(x in -10.0..10.0f64, y in -10.0..10.0f64, sigma in 1e-9..1.0f64) {
        let g = GenerativeModel::Nav(NavModel { start: [x, y], sigma });
        prop_assert_eq!(params::read_generative(&params::write_generative(&g)).unwrap(), g);
    }

    #[test]
    fn truncations_are_rejected(cut in 1usize..200) {
        let arch = Arch::with_hidden(2, &[4], 3, Activation::Tanh, Head::Softmax).unwrap();
        let e = RewardEnsemble::init(&arch, 2, NAV_REWARDS.to_vec(), Featurizer::NextState, 3).unwrap();
        let text = params::write_ensemble(&e);
        let lines: Vec<&str> = text.lines().collect();
        let keep = lines.len().saturating_sub(cut).max(1);
        let short = lines[..keep].join("\n");
        prop_assert!(params::read_ensemble(&short).is_err());
    }
}
