mod common;

use common::{spiral, supernet_spec};
use gtn_core::nas::{budget_variants, search, SearchBudget};
use gtn_core::nn::{BlockSpec, InputShape};
use gtn_core::supernet::SupernetSpec;
use gtn_core::train::TrainConfig;
use gtn_core::Error;

fn cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        phi_lr: 0.5,
        ..Default::default()
    }
}

fn deep(layers: usize) -> SupernetSpec {
    SupernetSpec {
        layers: (0..layers)
            .map(|_| vec![BlockSpec::dense(16, 2, 8), BlockSpec::dense(8, 1, 8), BlockSpec::identity(8)])
            .collect(),
        ..supernet_spec(3)
    }
}

#[test]
fn single_candidate_layers_leave_one_choice() {
    let spec = SupernetSpec {
        layers: (0..3).map(|_| vec![BlockSpec::dense(8, 1, 8)]).collect(),
        ..supernet_spec(3)
    };
    let data = spiral(3, 20, 0.1, 0);
    let out = search(&spec, &data, SearchBudget { max_layers: 3, epochs: 2, seed: 0 }, &cfg()).unwrap();
    assert_eq!(out.sample.0, vec![0, 0, 0]);
    assert!(out.probabilities.iter().all(|p| p == &vec![1.0]));
}

#[test]
fn search_truncates_to_budget() {
    let data = spiral(3, 20, 0.1, 1);
    let out = search(&deep(6), &data, SearchBudget { max_layers: 3, epochs: 1, seed: 1 }, &cfg()).unwrap();
    assert_eq!(out.sample.len(), 3);
    assert_eq!(out.param_count, deep(6).truncated(3).unwrap().student_param_count(&out.sample).unwrap());
    for bad in [0, 7] {
        let err = search(&deep(6), &data, SearchBudget { max_layers: bad, epochs: 1, seed: 1 }, &cfg()).unwrap_err();
        assert!(matches!(err, Error::InvalidBudget { .. }), "{err}");
    }
}

#[test]
fn budget_variants_shrink_and_repeat() {
    let data = spiral(3, 30, 0.1, 2);
    let run = || budget_variants(&deep(4), &data, &[4, 3, 2], 3, 2, &cfg()).unwrap();
    let a = run();
    assert_eq!(a.iter().map(|o| o.sample.len()).collect::<Vec<_>>(), vec![4, 3, 2]);
    assert!(a.windows(2).all(|w| w[0].param_count >= w[1].param_count));
    assert_eq!(a, run());
    assert!(budget_variants(&deep(4), &data, &[2, 3], 1, 2, &cfg()).is_err());
}

/// Stem is 2→8, head is 8→3.
#[test]
fn counts_follow_closed_forms() {
    let spec = deep(4);
    for out in budget_variants(&spec, &spiral(3, 20, 0.1, 3), &[4, 3, 2], 2, 3, &cfg()).unwrap() {
        let t = spec.truncated(out.sample.len()).unwrap();
        let by_hand: usize = t.sample_specs(&out.sample).unwrap().iter().map(|b| b.param_count()).sum::<usize>()
            + (2 * 8 + 8)
            + (8 * 3 + 3);
        assert_eq!(out.param_count, by_hand);
    }
}

#[test]
fn planted_zero_ops_are_avoided() {
    let spec = SupernetSpec {
        input: InputShape::Vector { dim: 2 },
        classes: 3,
        feature_dim: 8,
        layers: (0..2).map(|_| vec![BlockSpec::zero(8, 8), BlockSpec::dense(16, 1, 8)]).collect(),
    };
    let data = spiral(3, 60, 0.1, 4);
    let good = (0..10)
        .filter(|&seed| {
            let out = search(&spec, &data, SearchBudget { max_layers: 2, epochs: 20, seed }, &cfg()).unwrap();
            out.sample.0.iter().all(|&j| j == 1)
        })
        .count();
    println!("planted search: {good}/10 seeds avoid the zero op");
    assert!(good >= 9, "{good}/10");
}
