use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use gtn_harness::config::{ExperimentConfig, Method};
use gtn_harness::pipeline::{
    dataset_for, distill_cell, load_teacher, read_records, run_pipeline, search_protocol, train_teacher_to, DistillCell,
    TeacherKey, RECORDS_FILE,
};
use gtn_harness::report::ExperimentReport;

#[derive(Parser)]
#[command(name = "gtn", version, about = "Generic teacher training and distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run a single seed instead of the config's list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `output`, resolved
    /// against the config's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg = cfg.with_seed(s);
        }
        // A relative `output` is relative to the config file.
        let out = match &self.out {
            Some(o) => o.clone(),
            None => self.config.parent().unwrap_or(Path::new(".")).join(&cfg.output),
        };
        Ok((cfg, out))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TeacherKind {
    Vanilla,
    Gtn,
    Sftn,
}

#[derive(Subcommand)]
enum Command {
    /// Train one teacher and write its checkpoint.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        teacher: TeacherKind,
        /// Pool index of the SFTN reference student.
        #[arg(long, default_value_t = 0)]
        reference: usize,
    },
    /// Distil one pool student under a checkpointed teacher.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint; not needed for `no-kd`.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// One of no-kd, vanilla-kd, dkd, sftn, gtn (the last two distil
        /// with vanilla KD).
        #[arg(long, default_value = "vanilla-kd")]
        method: Method,
        /// Pool index of the student.
        #[arg(long)]
        student: usize,
    },
    /// Budgeted architecture search; optionally distil the found students.
    Search {
        #[command(flatten)]
        common: Common,
        /// Also distil each found student under vanilla and GTN teachers.
        #[arg(long)]
        distill: bool,
    },
    /// Full comparison pipeline; resumes from existing records.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Rebuild the report from the records in an output directory.
    Report {
        /// Directory written by `run`.
        #[arg(long)]
        out: PathBuf,
        /// Config to use instead of the copy stored in the directory.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn seed_of(cfg: &ExperimentConfig) -> u64 {
    cfg.seeds[0]
}

/// Created only once arguments have been checked, so a rejected command
/// leaves nothing behind.
fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::TrainTeacher {
            common,
            teacher,
            reference,
        } => {
            let (cfg, out) = common.load()?;
            let key = match teacher {
                TeacherKind::Vanilla => TeacherKey::Vanilla,
                TeacherKind::Gtn => TeacherKey::Gtn,
                TeacherKind::Sftn => {
                    if reference >= cfg.pool.len() {
                        bail!("--reference {reference} outside a pool of {}", cfg.pool.len());
                    }
                    TeacherKey::Sftn { reference }
                }
            };
            let seed = seed_of(&cfg);
            ensure_dir(&out)?;
            let path = out.join(format!("teacher-{}-s{seed}.gtn", key.label()));
            let rec = train_teacher_to(&cfg, &key, seed, &path)?;
            println!("{}", serde_json::to_string_pretty(&rec)?);
        }
        Command::Distill {
            common,
            teacher,
            method,
            student,
        } => {
            let (cfg, out) = common.load()?;
            if student >= cfg.pool.len() {
                bail!("--student {student} outside a pool of {}", cfg.pool.len());
            }
            let seed = seed_of(&cfg);
            let model = match (&teacher, method) {
                (Some(p), _) => load_teacher(p)?,
                (None, Method::NoKd) => gtn_core::nn::Model::new_teacher(
                    &cfg.teacher,
                    &mut gtn_core::train::stream_rng(seed, gtn_core::train::RngStream::TeacherInit),
                )?,
                (None, m) => bail!("--teacher is required for {m}"),
            };
            let splits = dataset_for(&cfg, seed)?;
            let cell = DistillCell {
                seed,
                method,
                teacher: None,
                student,
            };
            let rec = distill_cell(&cfg, &cell, &model, &splits)?;
            ensure_dir(&out)?;
            write_json(&out.join(format!("distill-{method}-{student}-s{seed}.json")), &rec)?;
            println!("{}", serde_json::to_string_pretty(&rec)?);
        }
        Command::Search { common, distill } => {
            let (cfg, out) = common.load()?;
            let rows = search_protocol(&cfg, distill)?;
            ensure_dir(&out)?;
            write_json(&out.join("search.json"), &rows)?;
            println!("{:<6} {:<7} {:<20} {:>8} {:>11} {:>8}", "seed", "budget", "sample", "params", "vanilla-kd", "gtn");
            for r in &rows {
                let pct = |v: Option<f64>| v.map_or("-".to_string(), |a| format!("{:.2}", 100.0 * a));
                println!(
                    "{:<6} {:<7} {:<20} {:>8} {:>11} {:>8}",
                    r.seed,
                    r.budget,
                    format!("{:?}", r.search.sample.0),
                    r.search.param_count,
                    pct(r.vanilla_kd),
                    pct(r.gtn)
                );
            }
        }
        Command::Run { common } => {
            let (cfg, out) = common.load()?;
            let outcome = run_pipeline(&cfg, &out)?;
            print!("{}", outcome.report.to_table());
            eprintln!("{} cells computed, results in {}", outcome.computed, out.display());
        }
        Command::Report { out, config } => {
            let cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => ExperimentConfig::load(&out.join("config.json"))?,
            };
            let records = read_records(&out.join(RECORDS_FILE))?;
            let report = ExperimentReport::from_records(&cfg, &records);
            report.write(&out)?;
            print!("{}", report.to_table());
        }
    }
    Ok(())
}
