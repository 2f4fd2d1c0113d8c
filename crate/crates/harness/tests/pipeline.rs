use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use gtn_core::kd::evaluate;
use gtn_core::nn::{predict, Model};
use gtn_core::train::{train_vanilla, TrainConfig};
use gtn_harness::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use gtn_harness::config::{ExperimentConfig, Method};
use gtn_harness::dataset::{make_dataset, DatasetSpec};
use gtn_harness::pipeline::{
    load_teacher, plan, read_records, run_pipeline_with, train_teacher_to, PipelineError, Record, TeacherKey,
    RECORDS_FILE,
};

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Three-class spiral, 4-block teacher, 3-layer supernet, short schedules.
fn small(methods: &[&str], pool: &str, seeds: &str) -> ExperimentConfig {
    let d = |w: usize| format!(r#"{{"kind": "dense-residual", "width": {w}, "depth": 1, "in_dim": 8, "out_dim": 8}}"#);
    let id = r#"{"kind": "identity", "width": 8, "depth": 1, "in_dim": 8, "out_dim": 8}"#;
    let layer = format!("[{}, {}, {id}]", d(16), d(8));
    let methods: Vec<String> = methods.iter().map(|m| format!("\"{m}\"")).collect();
    ExperimentConfig::from_json(&format!(
        r#"{{
        "seeds": {seeds},
        "dataset": {{"kind": "spiral", "classes": 3, "points_per_class": 40, "noise": 0.2}},
        "teacher": {{"input": {{"kind": "vector", "dim": 2}}, "classes": 3, "width": 12, "hidden": 16, "block_depth": 2, "blocks": 4}},
        "supernet": {{"input": {{"kind": "vector", "dim": 2}}, "classes": 3, "feature_dim": 8, "layers": [{layer}, {layer}, {layer}]}},
        "pool": {pool},
        "methods": [{}],
        "teacher_training": {{"epochs": 4, "batch_size": 16}},
        "distillation": {{"epochs": 4, "batch_size": 16}}
    }}"#,
        methods.join(", ")
    ))
    .unwrap()
}

fn all_methods() -> ExperimentConfig {
    small(&["no-kd", "vanilla-kd", "dkd", "sftn", "gtn"], "[[0, 1, 2], [1, 2, 0], [2, 2, 2]]", "[0, 1]")
}

#[test]
fn golden_config_normalizes_exactly() {
    let cfg = ExperimentConfig::load(&fixture("minimal.json")).unwrap();
    let got: serde_json::Value = serde_json::from_str(&cfg.normalized_json()).unwrap();
    let want: serde_json::Value = serde_json::from_str(&fs::read_to_string(fixture("minimal.normalized.json")).unwrap()).unwrap();
    assert_eq!(got, want);
}

#[test]
fn counting_contract() {
    let cfg = small(&["vanilla-kd", "gtn"], "[[0, 1, 2], [1, 1, 1]]", "[7]");
    let p = plan(&cfg);
    assert_eq!(p.teachers.len(), 2);
    assert_eq!(p.distills.len(), 4);
    let dir = tempfile::tempdir().unwrap();
    let out = run_pipeline_with(&cfg, dir.path(), 1).unwrap();
    let teachers = out.records.iter().filter(|r| matches!(r, Record::Teacher(_))).count();
    let distills = out.records.iter().filter(|r| matches!(r, Record::Distill(_))).count();
    assert_eq!((teachers, distills), (2, 4));
    assert_eq!(out.computed, 6);
    assert!(out.report.failures.is_empty());
}

#[test]
fn labels_only_run_has_no_deltas() {
    let cfg = small(&["no-kd"], "[[0, 1, 2], [1, 1, 1]]", "[0]");
    let dir = tempfile::tempdir().unwrap();
    let report = run_pipeline_with(&cfg, dir.path(), 1).unwrap().report;
    assert_eq!(report.columns, vec!["no-kd".to_string()]);
    assert!(report.aggregates.is_empty());
    assert!(report.students.iter().all(|s| s.delta.is_empty() && s.accuracy.len() == 1));
    assert!(report.notes.iter().any(|n| n.contains("vanilla-kd column absent")));
    assert!(report.teachers.is_empty());
}

/// Recomputes every aggregate straight from the JSON lines, without the
/// harness's record types.
#[test]
fn aggregates_match_independent_recomputation() {
    let cfg = all_methods();
    let dir = tempfile::tempdir().unwrap();
    let report = run_pipeline_with(&cfg, dir.path(), 1).unwrap().report;

    let text = fs::read_to_string(dir.path().join(RECORDS_FILE)).unwrap();
    let mut sums: BTreeMap<(u64, String), (f64, f64)> = BTreeMap::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if v["record"] != "distill" {
            continue;
        }
        let method = v["method"].as_str().unwrap().to_string();
        let column = if method == "sftn" {
            format!("sftn[{}]", v["teacher"]["reference"].as_u64().unwrap())
        } else {
            method
        };
        let e = sums.entry((v["student"].as_u64().unwrap(), column)).or_default();
        e.0 += 100.0 * v["accuracy"].as_f64().unwrap();
        e.1 += 1.0;
    }
    let mean = |s: u64, c: &str| {
        let (t, n) = sums[&(s, c.to_string())];
        t / n
    };
    let stats = |d: &[f64]| {
        let n = d.len() as f64;
        let mu = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
        let hi = d.iter().cloned().fold(f64::MIN, f64::max);
        let lo = d.iter().cloned().fold(f64::MAX, f64::min);
        (mu, var.sqrt(), hi - lo)
    };
    let students = 0..cfg.pool.len() as u64;
    for col in ["no-kd", "dkd", "gtn"] {
        let d: Vec<f64> = students.clone().map(|s| mean(s, col) - mean(s, "vanilla-kd")).collect();
        let (mu, sigma, range) = stats(&d);
        let a = report.aggregate(col).unwrap();
        assert!((a.mu - mu).abs() < 1e-9 && (a.sigma - sigma).abs() < 1e-9 && (a.range - range).abs() < 1e-9, "{col}");
        assert_eq!(a.n, 3);
    }
    let nonref: Vec<f64> = students.clone().filter(|&s| s != 0).map(|s| mean(s, "sftn[0]") - mean(s, "vanilla-kd")).collect();
    let a = report.aggregate("sftn-nonref").unwrap();
    assert!((a.mu - stats(&nonref).0).abs() < 1e-9);
    assert_eq!(a.n, 2);
    for s in &report.students {
        for (c, d) in &s.delta {
            assert!((d - (s.accuracy[c] - s.accuracy["vanilla-kd"])).abs() < 1e-9);
        }
    }
    assert_eq!(report.sftn_deltas.len(), 1);
    assert_eq!(report.sftn_deltas[0].deltas.len(), 3);
    assert!(dir.path().join("timecost.svg").exists());
}

#[test]
fn reruns_and_thread_counts_agree() {
    let cfg = all_methods();
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_pipeline_with(&cfg, a.path(), 1).unwrap().report;
    let rb = run_pipeline_with(&cfg, b.path(), 1).unwrap().report;
    let rc = run_pipeline_with(&cfg, c.path(), 3).unwrap().report;
    assert_eq!(ra.results_digest, rb.results_digest);
    assert_eq!(ra.results_digest, rc.results_digest);
    for (x, y) in ra.students.iter().zip(&rc.students) {
        for (k, v) in &x.accuracy {
            assert_eq!(v.to_bits(), y.accuracy[k].to_bits());
        }
    }
}

#[test]
fn interrupted_run_resumes_to_the_same_report() {
    let cfg = all_methods();
    let full = tempfile::tempdir().unwrap();
    let reference = run_pipeline_with(&cfg, full.path(), 1).unwrap();

    let cut = tempfile::tempdir().unwrap();
    let first = run_pipeline_with(&cfg, cut.path(), 1).unwrap();
    let path = cut.path().join(RECORDS_FILE);
    let text = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    // Keep the first seed's teachers and a few cells, then a torn line.
    let keep = 9;
    let torn = &lines[keep][..lines[keep].len() / 2];
    fs::write(&path, format!("{}\n{torn}", lines[..keep].join("\n"))).unwrap();
    let resumed = run_pipeline_with(&cfg, cut.path(), 1).unwrap();
    assert_eq!(resumed.computed, first.computed - keep);
    assert_eq!(resumed.report.results_digest, reference.report.results_digest);
    assert_eq!(read_records(&path).unwrap().len(), first.records.len());
}

#[test]
fn output_of_another_experiment_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline_with(&small(&["no-kd"], "[[0, 0, 0]]", "[0]"), dir.path(), 1).unwrap();
    let other = small(&["no-kd"], "[[1, 1, 1]]", "[0]");
    assert!(matches!(run_pipeline_with(&other, dir.path(), 1), Err(PipelineError::ForeignOutput(_))));
    // A different seed list is the same experiment.
    run_pipeline_with(&small(&["no-kd"], "[[0, 0, 0]]", "[1]"), dir.path(), 1).unwrap();
}

#[test]
fn teacher_checkpoint_round_trips() {
    let cfg = all_methods();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.gtn");
    let rec = train_teacher_to(&cfg, &TeacherKey::Gtn, 3, &path).unwrap();
    let loaded = load_teacher(&path).unwrap();
    assert_eq!(loaded.params.checksum(), rec.checksum);

    let splits = make_dataset(&cfg.dataset, 11).unwrap();
    let again = train_teacher_to(&cfg, &TeacherKey::Gtn, 3, &dir.path().join("u.gtn")).unwrap();
    assert_eq!(again.checksum, rec.checksum);
    let a = predict(&loaded, &splits.test.inputs).unwrap();
    let b = predict(&load_teacher(&dir.path().join("u.gtn")).unwrap(), &splits.test.inputs).unwrap();
    assert_eq!(a, b);

    for (x, y) in loaded.params.iter().zip(load_checkpoint(&path).unwrap().arrays) {
        assert_eq!(x.name, y.name);
        let bits = |t: &gtn_core::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x.value), bits(&y.tensor));
    }
}

#[test]
fn store_round_trip_is_bit_exact() {
    let data = make_dataset(&DatasetSpec::Spiral { classes: 3, points_per_class: 30, noise: 0.2 }, 5).unwrap();
    let spec = all_methods().teacher;
    let trained = train_vanilla(&TrainConfig { epochs: 2, ..Default::default() }, &spec, &data.train).unwrap().teacher;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.gtn");
    save_checkpoint(&trained.params, "{}", &path).unwrap();
    let mut fresh = Model::new_teacher(&spec, &mut gtn_core::train::stream_rng(99, gtn_core::train::RngStream::TeacherInit)).unwrap();
    assert_ne!(fresh.params.checksum(), trained.params.checksum());
    load_checkpoint(&path).unwrap().restore(&mut fresh.params).unwrap();
    assert_eq!(fresh.params.checksum(), trained.params.checksum());
    assert_eq!(predict(&fresh, &data.test.inputs).unwrap(), predict(&trained, &data.test.inputs).unwrap());
    assert_eq!(Checkpoint::from_store(&fresh.params, "{}").encode().unwrap(), fs::read(&path).unwrap());
}

#[test]
fn byte_fixture_file_loads() {
    let ck = load_checkpoint(&fixture("two_arrays.gtn")).unwrap();
    assert_eq!(ck.metadata, r#"{"note":"fixture"}"#);
    assert_eq!(ck.arrays.len(), 2);
    assert_eq!(ck.arrays[0].name, "w");
    assert_eq!(ck.arrays[0].tensor.shape(), &[2, 2]);
    assert_eq!(ck.arrays[0].tensor.data(), &[1.0, -2.0, 0.5, 3.0]);
    assert_eq!(ck.arrays[1].name, "bias");
    assert_eq!(ck.arrays[1].tensor.shape(), &[3]);
    assert_eq!(ck.arrays[1].tensor.data(), &[0.25, 0.0, -1.5]);
}

#[test]
fn well_separated_blobs_are_easy() {
    let spec = DatasetSpec::Blobs {
        classes: 3,
        dims: 4,
        separation: 10.0,
        points_per_class: 200,
    };
    let splits = make_dataset(&spec, 0).unwrap();
    let teacher = gtn_core::nn::TeacherSpec {
        input: gtn_core::nn::InputShape::Vector { dim: 4 },
        classes: 3,
        width: 16,
        hidden: 16,
        block_depth: 1,
        blocks: 1,
    };
    let cfg = TrainConfig { epochs: 20, ..Default::default() };
    let out = train_vanilla(&cfg, &teacher, &splits.train).unwrap();
    let acc = evaluate(&out.teacher, &splits.test).unwrap();
    assert!(acc > 0.99, "test accuracy {acc}");
}

#[test]
fn method_names_round_trip() {
    for m in Method::ALL {
        assert_eq!(m.name().parse::<Method>().unwrap(), m);
    }
}
