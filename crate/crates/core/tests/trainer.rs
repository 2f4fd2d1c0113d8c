mod common;

use std::collections::BTreeSet;

use common::{separable, spiral, supernet_spec, teacher_spec};
use gtn_core::kd::evaluate;
use gtn_core::losses::loss_ct;
use gtn_core::nn::Model;
use gtn_core::supernet::ArchitectureSample;
use gtn_core::train::{
    graft_branches, stream_rng, train_gtn, train_sftn, train_vanilla, OptimizerState, Phase, RngStream, TeacherMode,
    TrainConfig,
};
use gtn_core::{ParamId, Tape};

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        branches: 3,
        ..Default::default()
    }
}

fn grafted(seed: u64) -> gtn_core::train::BranchedTeacher {
    let t = Model::new_teacher(&teacher_spec(3), &mut stream_rng(seed, RngStream::TeacherInit)).unwrap();
    graft_branches(t, &supernet_spec(3), 3, TeacherMode::Gtn, &mut stream_rng(seed, RngStream::BranchInit)).unwrap()
}

#[test]
fn zero_epochs_returns_initial_teacher() {
    let data = spiral(3, 20, 0.1, 0);
    let init = Model::new_teacher(&teacher_spec(3), &mut stream_rng(5, RngStream::TeacherInit)).unwrap();
    let c = TrainConfig { seed: 5, ..cfg(0) };
    let reference = ArchitectureSample(vec![0, 1, 2]);
    for out in [
        train_gtn(&c, &teacher_spec(3), &supernet_spec(3), &data).unwrap(),
        train_sftn(&c, &teacher_spec(3), &supernet_spec(3), &reference, &data).unwrap(),
        train_vanilla(&c, &teacher_spec(3), &data).unwrap(),
    ] {
        assert_eq!(out.teacher.params.checksum(), init.params.checksum());
    }
}

#[test]
fn trainers_are_deterministic_and_discard_branches() {
    let data = spiral(3, 20, 0.1, 1);
    let c = cfg(2);
    let reference = ArchitectureSample(vec![0, 1, 2]);
    let runs = |_: usize| {
        [
            train_gtn(&c, &teacher_spec(3), &supernet_spec(3), &data).unwrap(),
            train_sftn(&c, &teacher_spec(3), &supernet_spec(3), &reference, &data).unwrap(),
            train_vanilla(&c, &teacher_spec(3), &data).unwrap(),
        ]
    };
    let (a, b) = (runs(0), runs(1));
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.teacher.params.checksum(), y.teacher.params.checksum());
        assert!(x.teacher.params.iter().all(|p| p.name.starts_with("teacher.")));
        assert!(x.wall_clock.as_nanos() > 0);
    }
    assert_eq!(a[0].phi_history.len(), 2);
}

#[test]
fn alternation_touches_disjoint_sets() {
    let data = spiral(3, 16, 0.1, 2);
    let mut bt = grafted(2);
    let c = cfg(1);
    let mut opt = OptimizerState::new(c.learning_rate, c.momentum);
    let mut rng = stream_rng(2, RngStream::Gates);
    let mut theta = 0;
    let mut phi = 0;
    for (i, batch) in data.batches(8, &mut stream_rng(2, RngStream::DataOrder)).iter().enumerate() {
        let teacher_before = bt.teacher.params.checksum();
        let branch_before = bt.branch_params.checksum();
        let phi_before = bt.probabilities();
        let rec = bt.step(batch, i as u64, 0, &mut opt, &c, &mut rng).unwrap();
        match rec.phase {
            Phase::Theta => {
                theta += 1;
                assert_eq!(i % 2, 0);
                assert!(!rec.touched.is_empty());
                assert_eq!(bt.probabilities(), phi_before);
                assert_ne!(bt.teacher.params.checksum(), teacher_before);
            }
            Phase::Phi => {
                phi += 1;
                assert_eq!(i % 2, 1);
                assert!(rec.touched.is_empty());
                assert_eq!(bt.teacher.params.checksum(), teacher_before);
                assert_eq!(bt.branch_params.checksum(), branch_before);
                // The baseline starts at the first observed loss, so the
                // first φ-step has zero advantage.
                if phi > 1 {
                    assert_ne!(bt.probabilities(), phi_before);
                }
            }
        }
    }
    assert_eq!(theta, phi);
}

#[test]
fn touched_parameters_stay_within_one_path_per_branch() {
    let data = spiral(3, 40, 0.1, 3);
    let mut bt = grafted(3);
    let c = cfg(1);
    let teacher_ids: BTreeSet<ParamId> = bt.teacher.params.ids().into_iter().collect();
    let mut opt = OptimizerState::new(c.learning_rate, c.momentum);
    let mut rng = stream_rng(3, RngStream::Gates);
    let mut order = stream_rng(3, RngStream::DataOrder);
    let mut iteration = 0u64;
    while iteration < 100 {
        for batch in data.batches(4, &mut order) {
            if iteration == 100 {
                break;
            }
            let rec = bt.step(&batch, iteration, 0, &mut opt, &c, &mut rng).unwrap();
            let mut allowed = teacher_ids.clone();
            for b in &bt.branches {
                allowed.extend(b.active_param_ids().unwrap());
            }
            for id in &rec.touched {
                assert!(allowed.contains(id), "iteration {iteration}: {id:?} outside the sampled paths");
            }
            iteration += 1;
        }
    }
}

#[test]
fn one_theta_step_descends() {
    let data = spiral(3, 16, 0.1, 4);
    let mut bt = grafted(4);
    let c = TrainConfig {
        learning_rate: 1e-3,
        momentum: 0.0,
        ..cfg(1)
    };
    let batch = data.as_batch();
    let mut rng = stream_rng(4, RngStream::Gates);
    let mut opt = OptimizerState::new(c.learning_rate, 0.0);
    let rec = bt.step(&batch, 0, 0, &mut opt, &c, &mut rng).unwrap();
    assert_eq!(rec.phase, Phase::Theta);

    // Re-evaluate with the same gates.
    let mut tape = Tape::new();
    let x = tape.input(batch.inputs.clone());
    let tf = bt.teacher.net.forward_features(&mut tape, &bt.teacher.params, x).unwrap();
    let zs: Vec<_> = bt
        .branches
        .iter()
        .map(|b| {
            let f = tape.detach(tf.features[b.attach - 1]).unwrap();
            b.forward(&mut tape, &bt.branch_params, f).unwrap()
        })
        .collect();
    let after = loss_ct(&mut tape, tf.logits, &zs, &batch.labels, &c.loss).unwrap();
    let after: f64 = tape.value(after).item().into();
    assert!(after < rec.loss, "{} -> {after}", rec.loss);
}

#[test]
fn single_candidate_gtn_equals_sftn() {
    let data = spiral(3, 20, 0.1, 5);
    let reference = ArchitectureSample(vec![0, 1, 2]);
    let fixed = supernet_spec(3).fixed(&reference).unwrap();
    let c = TrainConfig {
        alternation_period: 1,
        seed: 5,
        ..cfg(3)
    };

    let g = graft_branches(
        Model::new_teacher(&teacher_spec(3), &mut stream_rng(5, RngStream::TeacherInit)).unwrap(),
        &fixed,
        3,
        TeacherMode::Gtn,
        &mut stream_rng(5, RngStream::BranchInit),
    )
    .unwrap();
    let s = graft_branches(
        Model::new_teacher(&teacher_spec(3), &mut stream_rng(5, RngStream::TeacherInit)).unwrap(),
        &fixed,
        3,
        TeacherMode::Sftn,
        &mut stream_rng(5, RngStream::BranchInit),
    )
    .unwrap();
    for (a, b) in g.branches.iter().zip(&s.branches) {
        assert_eq!(a.layers.len(), b.layers.len());
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            let shape = |l: &gtn_core::supernet::SupernetLayer| {
                l.candidates.iter().map(|c| (c.spec.clone(), c.shared_key, c.params.len())).collect::<Vec<_>>()
            };
            assert_eq!(shape(la), shape(lb));
        }
    }
    assert_eq!(g.branch_params.checksum(), s.branch_params.checksum());

    let gtn = train_gtn(&c, &teacher_spec(3), &fixed, &data).unwrap();
    let sftn = train_sftn(&c, &teacher_spec(3), &supernet_spec(3), &reference, &data).unwrap();
    assert_eq!(gtn.curve.len(), sftn.curve.len());
    for (a, b) in gtn.curve.iter().zip(&sftn.curve) {
        assert_eq!(a.loss.to_bits(), b.loss.to_bits(), "iteration {}", a.iteration);
    }
    assert_eq!(gtn.teacher.params.checksum(), sftn.teacher.params.checksum());
}

#[test]
fn kl_free_frozen_gtn_tracks_vanilla() {
    let data = spiral(3, 20, 0.1, 6);
    let mut c = TrainConfig {
        seed: 6,
        phi_freeze_epochs: 3,
        ..cfg(3)
    };
    c.loss.alpha = 0.0;
    let gtn = train_gtn(&c, &teacher_spec(3), &supernet_spec(3), &data).unwrap();
    let van = train_vanilla(&c, &teacher_spec(3), &data).unwrap();
    assert_eq!(gtn.curve.len(), van.curve.len());
    for (a, b) in gtn.curve.iter().zip(&van.curve) {
        assert_eq!(a.phase, Phase::Theta);
        assert_eq!(a.teacher_ce.to_bits(), b.loss.to_bits(), "iteration {}", a.iteration);
    }
    assert_eq!(gtn.teacher.params.checksum(), van.teacher.params.checksum());
}

#[test]
fn gtn_fits_two_class_spiral() {
    let data = spiral(2, 100, 0.1, 7);
    let c = TrainConfig { seed: 7, ..cfg(20) };
    let out = train_gtn(&c, &teacher_spec(2), &supernet_spec(2), &data).unwrap();
    let acc = evaluate(&out.teacher, &data).unwrap();
    assert!(acc > 0.9, "train accuracy {acc}");
}

#[test]
fn vanilla_loss_settles_on_separable_data() {
    let data = separable(50, 8);
    let c = TrainConfig { seed: 8, ..cfg(15) };
    let out = train_vanilla(&c, &teacher_spec(2), &data).unwrap();
    let per_epoch: Vec<f64> = out
        .curve
        .chunk_by(|a, b| a.epoch == b.epoch)
        .map(|e| e.iter().map(|r| r.loss).sum::<f64>() / e.len() as f64)
        .collect();
    for w in per_epoch.windows(2) {
        assert!(w[1] <= w[0] * 1.05 + 1e-3, "{per_epoch:?}");
    }
}

#[test]
fn vanilla_memorises_32_points() {
    let data = spiral(2, 16, 0.0, 9);
    let c = TrainConfig {
        seed: 9,
        batch_size: 8,
        ..cfg(200)
    };
    let out = train_vanilla(&c, &teacher_spec(2), &data).unwrap();
    assert_eq!(evaluate(&out.teacher, &data).unwrap(), 1.0);
}
