//! The method comparison pipeline.
//!
//! For every config seed: build the dataset, train one teacher per
//! teacher-needing method (one SFTN teacher per reference student), then
//! distill every pool student under every method. Each finished cell is
//! appended to `records.jsonl` and each trained teacher is checkpointed,
//! so an interrupted run resumes where it stopped.
//!
//! Cell randomness comes from [`derive_seed`] over the config seed and a
//! role string, never from scheduling order. Roles are shared on purpose:
//! all teachers of one seed start from the same initial trunk, and a given
//! pool student starts from the same weights under every method, so the
//! per-student differences between methods are paired.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use gtn_core::data::Dataset;
use gtn_core::kd::{distill, evaluate, DistillJob, KdMethod};
use gtn_core::nas::{budget_variants, SearchOutcome};
use gtn_core::nn::{Model, TeacherNet, TeacherSpec};
use gtn_core::supernet::ArchitectureSample;
use gtn_core::train::{stream_rng, train_gtn, train_sftn, train_vanilla, RngStream, TrainConfig, TrainOutcome};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use crate::config::{ExperimentConfig, Method};
use crate::dataset::{make_dataset, DatasetError, Splits};
use crate::report::ExperimentReport;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const FINGERPRINT_FILE: &str = "fingerprint";
pub const THREADS_ENV: &str = "GTN_THREADS";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path} line {line}: {source}")]
    Record {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{0} holds results of a different experiment; choose another output directory")]
    ForeignOutput(PathBuf),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Core(#[from] gtn_core::Error),
    #[error("{0}")]
    Stage(String),
}

type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// First 8 bytes (little-endian) of SHA-256 over the seed and role.
pub fn derive_seed(seed: u64, role: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(role.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Identity of an experiment independent of its seeds and output path.
pub fn fingerprint(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.seeds.clear();
    c.output = PathBuf::new();
    let digest = Sha256::digest(c.normalized_json().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TeacherKey {
    Vanilla,
    Gtn,
    /// Specialised to `pool[reference]`.
    Sftn { reference: usize },
}

impl TeacherKey {
    pub fn label(&self) -> String {
        match self {
            TeacherKey::Vanilla => "vanilla".into(),
            TeacherKey::Gtn => "gtn".into(),
            TeacherKey::Sftn { reference } => format!("sftn[{reference}]"),
        }
    }
}

/// Teachers a method distills from. Empty for `no-kd`.
pub fn teachers_for(cfg: &ExperimentConfig, method: Method) -> Vec<TeacherKey> {
    match method {
        Method::NoKd => Vec::new(),
        Method::VanillaKd | Method::Dkd => vec![TeacherKey::Vanilla],
        Method::Gtn => vec![TeacherKey::Gtn],
        Method::Sftn => cfg
            .sftn_references
            .iter()
            .map(|r| TeacherKey::Sftn {
                reference: cfg.pool.iter().position(|p| p == r).expect("validated: reference in pool"),
            })
            .collect(),
    }
}

fn kd_method(method: Method) -> KdMethod {
    match method {
        Method::NoKd => KdMethod::None,
        Method::Dkd => KdMethod::Dkd,
        Method::VanillaKd | Method::Sftn | Method::Gtn => KdMethod::Vanilla,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DistillCell {
    pub seed: u64,
    pub method: Method,
    pub teacher: Option<TeacherKey>,
    pub student: usize,
}

impl DistillCell {
    pub fn id(&self) -> String {
        let t = self.teacher.as_ref().map_or("-".to_string(), TeacherKey::label);
        format!("s{}/distill/{}/{}/{}", self.seed, self.method, t, self.student)
    }
}

fn teacher_cell_id(seed: u64, key: &TeacherKey) -> String {
    format!("s{seed}/teacher/{}", key.label())
}

/// Every cell a config asks for, in canonical order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Plan {
    pub teachers: Vec<(u64, TeacherKey)>,
    pub distills: Vec<DistillCell>,
}

pub fn plan(cfg: &ExperimentConfig) -> Plan {
    let mut p = Plan::default();
    for &seed in &cfg.seeds {
        let mut keys: Vec<TeacherKey> = cfg.methods.iter().flat_map(|&m| teachers_for(cfg, m)).collect();
        keys.sort();
        keys.dedup();
        p.teachers.extend(keys.into_iter().map(|k| (seed, k)));
        for &method in &cfg.methods {
            let teachers = teachers_for(cfg, method);
            let teachers: Vec<Option<TeacherKey>> =
                if teachers.is_empty() { vec![None] } else { teachers.into_iter().map(Some).collect() };
            for teacher in teachers {
                for student in 0..cfg.pool.len() {
                    p.distills.push(DistillCell {
                        seed,
                        method,
                        teacher: teacher.clone(),
                        student,
                    });
                }
            }
        }
    }
    p
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherRecord {
    pub seed: u64,
    pub teacher: TeacherKey,
    pub wall_clock_secs: f64,
    pub test_accuracy: f64,
    pub checksum: u64,
    /// Path relative to the output directory.
    pub checkpoint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillRecord {
    pub seed: u64,
    pub method: Method,
    pub teacher: Option<TeacherKey>,
    pub student: usize,
    pub sample: ArchitectureSample,
    pub accuracy: f64,
    pub wall_clock_secs: f64,
}

impl DistillRecord {
    pub fn cell(&self) -> DistillCell {
        DistillCell {
            seed: self.seed,
            method: self.method,
            teacher: self.teacher.clone(),
            student: self.student,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub cell: String,
    pub error: String,
}

/// One line of `records.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "kebab-case")]
pub enum Record {
    Teacher(TeacherRecord),
    Distill(DistillRecord),
    Failure(FailureRecord),
}

/// Reads every complete record. A final line cut short by an interrupted
/// write is ignored.
pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() => {}
            Err(source) => {
                return Err(PipelineError::Record {
                    path: path.to_path_buf(),
                    line: i + 1,
                    source,
                })
            }
        }
    }
    Ok(out)
}

struct RecordLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl RecordLog {
    fn open(path: PathBuf) -> Result<Self> {
        // Drop a torn final line so appends start on a fresh line.
        if let Ok(text) = fs::read_to_string(&path) {
            if !text.is_empty() && !text.ends_with('\n') {
                let keep = text.rfind('\n').map_or(0, |i| i + 1);
                fs::write(&path, &text[..keep]).map_err(io_err(&path))?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        Ok(Self {
            path,
            file: Mutex::new(file),
        })
    }

    fn append(&self, record: &Record) -> Result<()> {
        let mut line = serde_json::to_string(record).expect("records serialize");
        line.push('\n');
        let mut f = self.file.lock().expect("record log lock");
        f.write_all(line.as_bytes()).map_err(io_err(&self.path))?;
        f.flush().map_err(io_err(&self.path))
    }
}

/// Worker count from `GTN_THREADS`, default 1.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

#[derive(Serialize, Deserialize)]
struct TeacherMeta {
    fingerprint: String,
    seed: u64,
    teacher: TeacherKey,
    epochs: usize,
    spec: TeacherSpec,
}

pub fn seed_config(base: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..base.clone() }
}

/// Trains the teacher a key names.
pub fn train_keyed_teacher(cfg: &ExperimentConfig, key: &TeacherKey, seed: u64, train: &Dataset) -> Result<TrainOutcome> {
    let tc = seed_config(&cfg.teacher_training, derive_seed(seed, "teacher"));
    let out = match key {
        TeacherKey::Vanilla => train_vanilla(&tc, &cfg.teacher, train)?,
        TeacherKey::Gtn => train_gtn(&tc, &cfg.teacher, &cfg.supernet, train)?,
        TeacherKey::Sftn { reference } => train_sftn(&tc, &cfg.teacher, &cfg.supernet, &cfg.pool[*reference], train)?,
    };
    Ok(out)
}

/// Distils one pool student. `teacher` is unused for `no-kd`.
pub fn distill_cell(
    cfg: &ExperimentConfig,
    cell: &DistillCell,
    teacher: &Model<TeacherNet>,
    splits: &Splits,
) -> Result<DistillRecord> {
    let dc = seed_config(&cfg.distillation, derive_seed(cell.seed, &format!("student/{}", cell.student)));
    let sample = &cfg.pool[cell.student];
    let out = distill(
        &DistillJob {
            teacher,
            supernet: &cfg.supernet,
            student: sample,
            method: kd_method(cell.method),
            cfg: &dc,
        },
        &splits.train,
        &splits.test,
    )?;
    Ok(DistillRecord {
        seed: cell.seed,
        method: cell.method,
        teacher: cell.teacher.clone(),
        student: cell.student,
        sample: sample.clone(),
        accuracy: out.accuracy,
        wall_clock_secs: out.wall_clock.as_secs_f64(),
    })
}

pub fn dataset_for(cfg: &ExperimentConfig, seed: u64) -> Result<Splits> {
    Ok(make_dataset(&cfg.dataset, derive_seed(seed, "dataset"))?)
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: ExperimentReport,
    pub records: Vec<Record>,
    /// Cells computed in this invocation (the rest were resumed).
    pub computed: usize,
}

/// Runs (or resumes) every cell of the plan into `out` with
/// [`worker_threads`] workers and builds the report from the persisted
/// records.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    run_pipeline_with(cfg, out, worker_threads())
}

pub fn run_pipeline_with(cfg: &ExperimentConfig, out: &Path, threads: usize) -> Result<RunOutcome> {
    fs::create_dir_all(out.join("teachers")).map_err(io_err(out))?;
    let fp = fingerprint(cfg);
    let fp_path = out.join(FINGERPRINT_FILE);
    match fs::read_to_string(&fp_path) {
        Ok(existing) if existing.trim() != fp => return Err(PipelineError::ForeignOutput(out.to_path_buf())),
        Ok(_) => {}
        Err(_) => fs::write(&fp_path, &fp).map_err(io_err(&fp_path))?,
    }
    fs::write(out.join("config.json"), cfg.normalized_json()).map_err(io_err(out))?;

    let records_path = out.join(RECORDS_FILE);
    let done = read_records(&records_path)?;
    let log = RecordLog::open(records_path.clone())?;
    let mut finished_teachers: BTreeMap<(u64, TeacherKey), TeacherRecord> = BTreeMap::new();
    let mut finished_cells = std::collections::BTreeSet::new();
    for r in &done {
        match r {
            Record::Teacher(t) => {
                finished_teachers.insert((t.seed, t.teacher.clone()), t.clone());
            }
            Record::Distill(d) => {
                finished_cells.insert(d.cell());
            }
            Record::Failure(_) => {}
        }
    }

    let workers = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| PipelineError::Stage(format!("thread pool: {e}")))?;
    let p = plan(cfg);
    let computed = Mutex::new(0usize);

    for &seed in &cfg.seeds {
        let splits = dataset_for(cfg, seed)?;
        let keys: Vec<TeacherKey> = p.teachers.iter().filter(|(s, _)| *s == seed).map(|(_, k)| k.clone()).collect();
        let teachers: BTreeMap<TeacherKey, Option<Model<TeacherNet>>> = workers.install(|| {
            keys.par_iter()
                .map(|key| {
                    let id = teacher_cell_id(seed, key);
                    let result = obtain_teacher(cfg, &fp, out, seed, key, finished_teachers.get(&(seed, key.clone())), &splits)
                        .and_then(|(model, fresh)| {
                            if let Some(rec) = fresh {
                                log.append(&Record::Teacher(rec))?;
                                *computed.lock().expect("counter lock") += 1;
                            }
                            Ok(model)
                        });
                    match result {
                        Ok(m) => (key.clone(), Some(m)),
                        Err(e) => {
                            let _ = log.append(&Record::Failure(FailureRecord { cell: id, error: e.to_string() }));
                            (key.clone(), None)
                        }
                    }
                })
                .collect()
        });
        // Labels-only students never read their teacher.
        let placeholder = Model::new_teacher(&cfg.teacher, &mut stream_rng(derive_seed(seed, "teacher"), RngStream::TeacherInit))?;

        let cells: Vec<&DistillCell> =
            p.distills.iter().filter(|c| c.seed == seed && !finished_cells.contains(*c)).collect();
        workers.install(|| {
            cells.par_iter().for_each(|cell| {
                let teacher = match &cell.teacher {
                    None => Some(&placeholder),
                    Some(k) => teachers.get(k).and_then(Option::as_ref),
                };
                let result = match teacher {
                    None => Err(PipelineError::Stage(format!(
                        "teacher {} unavailable",
                        cell.teacher.as_ref().map(TeacherKey::label).unwrap_or_default()
                    ))),
                    Some(t) => distill_cell(cfg, cell, t, &splits),
                };
                let record = match result {
                    Ok(r) => {
                        *computed.lock().expect("counter lock") += 1;
                        Record::Distill(r)
                    }
                    Err(e) => Record::Failure(FailureRecord {
                        cell: cell.id(),
                        error: e.to_string(),
                    }),
                };
                let _ = log.append(&record);
            })
        });
    }

    let records = read_records(&records_path)?;
    let report = ExperimentReport::from_records(cfg, &records);
    report.write(out)?;
    Ok(RunOutcome {
        report,
        records,
        computed: computed.into_inner().expect("counter lock"),
    })
}

/// Loads a finished teacher from its checkpoint or trains it. The second
/// value is the record to persist when training happened.
fn obtain_teacher(
    cfg: &ExperimentConfig,
    fp: &str,
    out: &Path,
    seed: u64,
    key: &TeacherKey,
    finished: Option<&TeacherRecord>,
    splits: &Splits,
) -> Result<(Model<TeacherNet>, Option<TeacherRecord>)> {
    if let Some(rec) = finished {
        if let Ok(ck) = load_checkpoint(&out.join(&rec.checkpoint)) {
            let mut model = Model::new_teacher(&cfg.teacher, &mut stream_rng(0, RngStream::TeacherInit))?;
            if ck.restore(&mut model.params).is_ok() && model.params.checksum() == rec.checksum {
                return Ok((model, None));
            }
        }
    }
    let trained = train_keyed_teacher(cfg, key, seed, &splits.train)?;
    let rel = format!("teachers/s{seed}-{}.gtn", key.label());
    let meta = serde_json::to_string(&TeacherMeta {
        fingerprint: fp.to_string(),
        seed,
        teacher: key.clone(),
        epochs: cfg.teacher_training.epochs,
        spec: cfg.teacher.clone(),
    })
    .expect("metadata serializes");
    save_checkpoint(&trained.teacher.params, &meta, &out.join(&rel))?;
    let rec = TeacherRecord {
        seed,
        teacher: key.clone(),
        wall_clock_secs: trained.wall_clock.as_secs_f64(),
        test_accuracy: evaluate(&trained.teacher, &splits.test)?,
        checksum: trained.teacher.params.checksum(),
        checkpoint: rel,
    };
    Ok((trained.teacher, Some(rec)))
}

/// Rebuilds a teacher from a checkpoint written by the pipeline or by
/// `train-teacher`.
pub fn load_teacher(path: &Path) -> Result<Model<TeacherNet>> {
    let ck = load_checkpoint(path)?;
    let meta: TeacherMeta = serde_json::from_str(&ck.metadata)
        .map_err(|e| PipelineError::Stage(format!("{}: teacher metadata: {e}", path.display())))?;
    let mut model = Model::new_teacher(&meta.spec, &mut stream_rng(0, RngStream::TeacherInit))?;
    ck.restore(&mut model.params)?;
    Ok(model)
}

/// Trains one teacher and writes its checkpoint to `path`.
pub fn train_teacher_to(cfg: &ExperimentConfig, key: &TeacherKey, seed: u64, path: &Path) -> Result<TeacherRecord> {
    let splits = dataset_for(cfg, seed)?;
    let trained = train_keyed_teacher(cfg, key, seed, &splits.train)?;
    let meta = serde_json::to_string(&TeacherMeta {
        fingerprint: fingerprint(cfg),
        seed,
        teacher: key.clone(),
        epochs: cfg.teacher_training.epochs,
        spec: cfg.teacher.clone(),
    })
    .expect("metadata serializes");
    save_checkpoint(&trained.teacher.params, &meta, path)?;
    Ok(TeacherRecord {
        seed,
        teacher: key.clone(),
        wall_clock_secs: trained.wall_clock.as_secs_f64(),
        test_accuracy: evaluate(&trained.teacher, &splits.test)?,
        checksum: trained.teacher.params.checksum(),
        checkpoint: path.display().to_string(),
    })
}

/// One searched student and its accuracy under the vanilla and generic
/// teachers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchRow {
    pub seed: u64,
    pub budget: usize,
    pub search: SearchOutcome,
    pub vanilla_kd: Option<f64>,
    pub gtn: Option<f64>,
}

/// Budgeted search on each seed's training split. With `distill_students`
/// set, each found student is also distilled under a vanilla and a GTN
/// teacher of that seed.
pub fn search_protocol(cfg: &ExperimentConfig, distill_students: bool) -> Result<Vec<SearchRow>> {
    if cfg.search.budgets.is_empty() {
        return Err(PipelineError::Stage("config has no search budgets".into()));
    }
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let splits = dataset_for(cfg, seed)?;
        let found = budget_variants(
            &cfg.supernet,
            &splits.train,
            &cfg.search.budgets,
            cfg.search.epochs,
            derive_seed(seed, "search"),
            &cfg.teacher_training,
        )?;
        let teachers = if distill_students {
            Some((
                train_keyed_teacher(cfg, &TeacherKey::Vanilla, seed, &splits.train)?.teacher,
                train_keyed_teacher(cfg, &TeacherKey::Gtn, seed, &splits.train)?.teacher,
            ))
        } else {
            None
        };
        for (budget, search) in cfg.search.budgets.iter().zip(found) {
            let (vanilla_kd, gtn) = match &teachers {
                None => (None, None),
                Some((v, g)) => {
                    let spec = cfg.supernet.truncated(*budget)?;
                    let dc = seed_config(&cfg.distillation, derive_seed(seed, &format!("search-student/{budget}")));
                    let run = |t: &Model<TeacherNet>| -> Result<f64> {
                        let job = DistillJob {
                            teacher: t,
                            supernet: &spec,
                            student: &search.sample,
                            method: KdMethod::Vanilla,
                            cfg: &dc,
                        };
                        Ok(distill(&job, &splits.train, &splits.test)?.accuracy)
                    };
                    (Some(run(v)?), Some(run(g)?))
                }
            };
            rows.push(SearchRow {
                seed,
                budget: *budget,
                search,
                vanilla_kd,
                gtn,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_depend_on_both_inputs() {
        assert_eq!(derive_seed(3, "teacher"), derive_seed(3, "teacher"));
        assert_ne!(derive_seed(3, "teacher"), derive_seed(4, "teacher"));
        assert_ne!(derive_seed(3, "teacher"), derive_seed(3, "student/0"));
    }

    #[test]
    fn cell_ids_are_readable() {
        let c = DistillCell {
            seed: 2,
            method: Method::Sftn,
            teacher: Some(TeacherKey::Sftn { reference: 1 }),
            student: 4,
        };
        assert_eq!(c.id(), "s2/distill/sftn/sftn[1]/4");
        let n = DistillCell {
            seed: 0,
            method: Method::NoKd,
            teacher: None,
            student: 0,
        };
        assert_eq!(n.id(), "s0/distill/no-kd/-/0");
    }

    #[test]
    fn torn_last_line_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(RECORDS_FILE);
        let rec = Record::Failure(FailureRecord {
            cell: "x".into(),
            error: "e".into(),
        });
        let line = serde_json::to_string(&rec).unwrap();
        fs::write(&path, format!("{line}\n{}", &line[..5])).unwrap();
        assert_eq!(read_records(&path).unwrap(), vec![rec.clone()]);
        fs::write(&path, format!("{}\n{line}\n", &line[..5])).unwrap();
        assert!(matches!(read_records(&path), Err(PipelineError::Record { line: 1, .. })));
    }
}
