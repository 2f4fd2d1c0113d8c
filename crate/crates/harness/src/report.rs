//! Reports built purely from persisted records: accuracy and Δ tables,
//! Δ statistics, the time-cost crossover and the memory table.
//!
//! Accuracies are percentages; Δ is in percentage points against the
//! vanilla-KD column of the same student, both averaged over seeds first.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use gtn_core::supernet::ArchitectureSample;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Method};
use crate::pipeline::{plan, teachers_for, FailureRecord, PipelineError, Record, TeacherKey};

/// Bytes per reported megabyte.
pub const MB: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Device {
    pub name: String,
    pub bytes: u64,
}

/// On-chip budgets of three edge devices: 4 MB, 8 MB and 1 GB.
pub fn default_devices() -> Vec<Device> {
    [("arm-ethos-n77", 4e6), ("edge-tpu", 8e6), ("raspberry-pi", 1e9)]
        .into_iter()
        .map(|(n, b)| Device {
            name: n.into(),
            bytes: b as u64,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryRow {
    pub label: String,
    pub params: u64,
    pub bytes_32: u64,
    /// Weights only, one byte each.
    pub bytes_8: u64,
    pub mb_32: f64,
    pub mb_8: f64,
    /// Whether the 8-bit weights fit each device, in device order.
    pub fits: Vec<bool>,
}

pub fn memory_row(label: impl Into<String>, params: u64, devices: &[Device]) -> MemoryRow {
    let bytes_32 = 4 * params;
    let bytes_8 = params;
    MemoryRow {
        label: label.into(),
        params,
        bytes_32,
        bytes_8,
        mb_32: bytes_32 as f64 / MB,
        mb_8: bytes_8 as f64 / MB,
        fits: devices.iter().map(|d| bytes_8 <= d.bytes).collect(),
    }
}

pub fn memory_report(students: &[(String, u64)], devices: &[Device]) -> Vec<MemoryRow> {
    students.iter().map(|(l, p)| memory_row(l.clone(), *p, devices)).collect()
}

/// Smallest `k` with `k · sftn > gtn`: the number of students beyond which
/// one generic teacher is cheaper than one specialised teacher each.
pub fn crossover(gtn_secs: f64, sftn_secs: f64) -> Option<u32> {
    if !(sftn_secs > 0.0) || !gtn_secs.is_finite() || gtn_secs < 0.0 {
        return None;
    }
    let mut k = (gtn_secs / sftn_secs).floor().max(0.0) as u32;
    while f64::from(k) * sftn_secs <= gtn_secs {
        k += 1;
    }
    while k > 1 && f64::from(k - 1) * sftn_secs > gtn_secs {
        k -= 1;
    }
    Some(k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub label: String,
    pub n: usize,
    pub mu: f64,
    /// Population standard deviation.
    pub sigma: f64,
    pub range: f64,
    pub min: f64,
    pub max: f64,
}

/// Mean, population σ and max − min of `deltas`. `None` when empty.
pub fn aggregate(label: impl Into<String>, deltas: &[f64]) -> Option<Aggregate> {
    if deltas.is_empty() {
        return None;
    }
    let n = deltas.len() as f64;
    let mu = deltas.iter().sum::<f64>() / n;
    let sigma = (deltas.iter().map(|d| (d - mu).powi(2)).sum::<f64>() / n).sqrt();
    let min = deltas.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = deltas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Some(Aggregate {
        label: label.into(),
        n: deltas.len(),
        mu,
        sigma,
        range: max - min,
        min,
        max,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentRow {
    pub student: usize,
    pub sample: ArchitectureSample,
    pub params: u64,
    /// Seed-mean accuracy (%) per column.
    pub accuracy: BTreeMap<String, f64>,
    /// Seed-mean accuracy minus the vanilla-KD column (pp).
    pub delta: BTreeMap<String, f64>,
    /// Seeds contributing to each column.
    pub seeds: BTreeMap<String, usize>,
}

/// Δ of each pool student under one SFTN teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftnDeltaRow {
    pub reference: usize,
    pub deltas: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherRow {
    pub seed: u64,
    pub teacher: String,
    pub wall_clock_secs: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimeCost {
    /// Mean training time per teacher kind (`vanilla`, `gtn`, `sftn`).
    pub mean_secs: BTreeMap<String, f64>,
    /// GTN time over mean single SFTN time.
    pub ratio: Option<f64>,
    pub k_star: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub columns: Vec<String>,
    pub students: Vec<StudentRow>,
    pub aggregates: Vec<Aggregate>,
    pub sftn_deltas: Vec<SftnDeltaRow>,
    pub notes: Vec<String>,
    pub teachers: Vec<TeacherRow>,
    pub timecost: TimeCost,
    pub devices: Vec<Device>,
    pub memory: Vec<MemoryRow>,
    /// Failures of cells that never succeeded.
    pub failures: Vec<FailureRecord>,
    /// SHA-256 over the accuracy, Δ and aggregate sections. Wall-clock
    /// fields are excluded, so equal digests mean equal results.
    pub results_digest: String,
}

fn column_of(method: Method, teacher: Option<&TeacherKey>) -> String {
    match (method, teacher) {
        (Method::Sftn, Some(k)) => k.label(),
        _ => method.name().to_string(),
    }
}

pub fn columns(cfg: &ExperimentConfig) -> Vec<String> {
    let mut cols = Vec::new();
    for &m in &cfg.methods {
        let ts = teachers_for(cfg, m);
        if m == Method::Sftn {
            cols.extend(ts.iter().map(|k| column_of(m, Some(k))));
        } else {
            cols.push(m.name().to_string());
        }
    }
    cols
}

impl ExperimentReport {
    pub fn from_records(cfg: &ExperimentConfig, records: &[Record]) -> Self {
        let cols = columns(cfg);
        let vanilla = Method::VanillaKd.name();
        let mut notes = Vec::new();

        // Latest record per cell wins, so a rerun after a failure replaces it.
        let mut acc: BTreeMap<(usize, String, u64), f64> = BTreeMap::new();
        let mut teachers: BTreeMap<(u64, TeacherKey), TeacherRow> = BTreeMap::new();
        let mut succeeded = std::collections::BTreeSet::new();
        for r in records {
            match r {
                Record::Distill(d) => {
                    acc.insert((d.student, column_of(d.method, d.teacher.as_ref()), d.seed), 100.0 * d.accuracy);
                    succeeded.insert(d.cell().id());
                }
                Record::Teacher(t) => {
                    teachers.insert(
                        (t.seed, t.teacher.clone()),
                        TeacherRow {
                            seed: t.seed,
                            teacher: t.teacher.label(),
                            wall_clock_secs: t.wall_clock_secs,
                            test_accuracy: 100.0 * t.test_accuracy,
                        },
                    );
                    succeeded.insert(format!("s{}/teacher/{}", t.seed, t.teacher.label()));
                }
                Record::Failure(_) => {}
            }
        }
        let mut failures: BTreeMap<String, FailureRecord> = BTreeMap::new();
        for r in records {
            if let Record::Failure(f) = r {
                if !succeeded.contains(&f.cell) {
                    failures.insert(f.cell.clone(), f.clone());
                }
            }
        }

        let has_vanilla = cols.iter().any(|c| c == vanilla);
        if !has_vanilla {
            notes.push("vanilla-kd column absent: Δ statistics need it as the baseline and are omitted".into());
        }
        let seeds: Vec<u64> = cfg.seeds.clone();
        let mut students = Vec::new();
        for (i, sample) in cfg.pool.iter().enumerate() {
            let mut accuracy = BTreeMap::new();
            let mut counts = BTreeMap::new();
            for c in &cols {
                let vals: Vec<f64> = seeds.iter().filter_map(|s| acc.get(&(i, c.clone(), *s)).copied()).collect();
                if !vals.is_empty() {
                    accuracy.insert(c.clone(), vals.iter().sum::<f64>() / vals.len() as f64);
                }
                counts.insert(c.clone(), vals.len());
            }
            let mut delta = BTreeMap::new();
            if let Some(&base) = accuracy.get(vanilla) {
                for (c, &a) in &accuracy {
                    if c != vanilla {
                        delta.insert(c.clone(), a - base);
                    }
                }
            }
            students.push(StudentRow {
                student: i,
                sample: sample.clone(),
                params: cfg.supernet.student_param_count(sample).map_or(0, |p| p as u64),
                accuracy,
                delta,
                seeds: counts,
            });
        }
        if students.iter().any(|s| s.seeds.values().any(|&n| n < seeds.len())) {
            notes.push("some cells are missing for some seeds; their means use the seeds available".into());
        }

        let mut aggregates = Vec::new();
        let sftn_keys = teachers_for(cfg, Method::Sftn);
        if has_vanilla {
            for c in cols.iter().filter(|c| *c != vanilla && !c.starts_with("sftn[")) {
                let d: Vec<f64> = students.iter().filter_map(|s| s.delta.get(c).copied()).collect();
                aggregates.extend(aggregate(c.clone(), &d));
            }
            if cfg.methods.contains(&Method::Sftn) {
                let mut all = Vec::new();
                let mut nonref = Vec::new();
                for k in &sftn_keys {
                    let TeacherKey::Sftn { reference } = k else { continue };
                    for s in &students {
                        if let Some(&d) = s.delta.get(&k.label()) {
                            all.push(d);
                            if s.student != *reference {
                                nonref.push(d);
                            }
                        }
                    }
                }
                aggregates.extend(aggregate("sftn", &all));
                aggregates.extend(aggregate("sftn-nonref", &nonref));
            }
        }
        let sftn_deltas = sftn_keys
            .iter()
            .filter_map(|k| match k {
                TeacherKey::Sftn { reference } => Some(SftnDeltaRow {
                    reference: *reference,
                    deltas: students.iter().map(|s| s.delta.get(&k.label()).copied()).collect(),
                }),
                _ => None,
            })
            .collect();

        let teacher_rows: Vec<TeacherRow> = teachers.into_values().collect();
        let mut by_kind: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for t in &teacher_rows {
            let kind = if t.teacher.starts_with("sftn") { "sftn".to_string() } else { t.teacher.clone() };
            by_kind.entry(kind).or_default().push(t.wall_clock_secs);
        }
        let mean_secs: BTreeMap<String, f64> =
            by_kind.into_iter().map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64)).collect();
        let (ratio, k_star) = match (mean_secs.get("gtn"), mean_secs.get("sftn")) {
            (Some(&g), Some(&s)) if s > 0.0 => (Some(g / s), crossover(g, s)),
            _ => (None, None),
        };

        let devices = default_devices();
        let memory = memory_report(
            &students
                .iter()
                .map(|s| (format!("s{} {:?}", s.student, s.sample.0), s.params))
                .collect::<Vec<_>>(),
            &devices,
        );

        let expected = plan(cfg);
        if expected.distills.len() + expected.teachers.len() > succeeded.len() && failures.is_empty() {
            notes.push("run incomplete: some planned cells have no record yet".into());
        }

        let mut report = Self {
            columns: cols,
            students,
            aggregates,
            sftn_deltas,
            notes,
            teachers: teacher_rows,
            timecost: TimeCost {
                mean_secs,
                ratio,
                k_star,
            },
            devices,
            memory,
            failures: failures.into_values().collect(),
            results_digest: String::new(),
        };
        report.results_digest = report.digest();
        report
    }

    fn digest(&self) -> String {
        let body = serde_json::to_string(&(&self.columns, &self.students, &self.aggregates, &self.sftn_deltas))
            .expect("report serializes");
        Sha256::digest(body.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn aggregate(&self, label: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.label == label)
    }

    /// Aligned plain-text rendering of every table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let w = self.columns.iter().map(|c| c.len()).max().unwrap_or(0).max(14);
        let _ = write!(s, "{:<4} {:<16} {:>8}", "id", "student", "params");
        for c in &self.columns {
            let _ = write!(s, " {c:>w$}");
        }
        s.push('\n');
        for r in &self.students {
            let _ = write!(s, "{:<4} {:<16} {:>8}", r.student, format!("{:?}", r.sample.0), r.params);
            for c in &self.columns {
                let cell = match (r.accuracy.get(c), r.delta.get(c)) {
                    (Some(a), Some(d)) => format!("{a:.2} ({d:+.2})"),
                    (Some(a), None) => format!("{a:.2}"),
                    _ => "-".into(),
                };
                let _ = write!(s, " {cell:>w$}");
            }
            s.push('\n');
        }
        if !self.aggregates.is_empty() {
            let _ = writeln!(s, "\n{:<12} {:>4} {:>8} {:>8} {:>8}", "method", "n", "mu", "sigma", "range");
            for a in &self.aggregates {
                let _ = writeln!(s, "{:<12} {:>4} {:>+8.3} {:>8.3} {:>8.3}", a.label, a.n, a.mu, a.sigma, a.range);
            }
        }
        if !self.teachers.is_empty() {
            let _ = writeln!(s, "\n{:<6} {:<10} {:>10} {:>9}", "seed", "teacher", "seconds", "test acc");
            for t in &self.teachers {
                let _ = writeln!(s, "{:<6} {:<10} {:>10.3} {:>9.2}", t.seed, t.teacher, t.wall_clock_secs, t.test_accuracy);
            }
            for (k, v) in &self.timecost.mean_secs {
                let _ = writeln!(s, "mean {k}: {v:.3} s");
            }
            match (self.timecost.ratio, self.timecost.k_star) {
                (Some(r), Some(k)) => {
                    let _ = writeln!(s, "gtn / sftn time ratio {r:.3}, crossover k* = {k}");
                }
                _ => s.push_str("crossover needs both gtn and sftn teachers\n"),
            }
        }
        let _ = write!(s, "\n{:<24} {:>10} {:>10} {:>10}", "memory", "params", "MB 32-bit", "MB 8-bit");
        for d in &self.devices {
            let _ = write!(s, " {:>14}", d.name);
        }
        s.push('\n');
        for m in &self.memory {
            let _ = write!(s, "{:<24} {:>10} {:>10.4} {:>10.4}", m.label, m.params, m.mb_32, m.mb_8);
            for f in &m.fits {
                let _ = write!(s, " {:>14}", if *f { "fits" } else { "no" });
            }
            s.push('\n');
        }
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        for f in &self.failures {
            let _ = writeln!(s, "failed: {} ({})", f.cell, f.error);
        }
        s
    }

    /// Teacher cost against the number of students served: SFTN grows by
    /// one teacher per student, GTN stays flat.
    pub fn timecost_svg(&self) -> Option<String> {
        let g = *self.timecost.mean_secs.get("gtn")?;
        let sf = *self.timecost.mean_secs.get("sftn")?;
        let kmax = (self.timecost.k_star.unwrap_or(1) + 3).max(7) as f64;
        let ymax = (kmax * sf).max(g) * 1.05;
        let (w, h, m) = (480.0, 320.0, 40.0);
        let x = |k: f64| m + (k / kmax) * (w - 2.0 * m);
        let y = |t: f64| h - m - (t / ymax) * (h - 2.0 * m);
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
        let _ = writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m);
        let _ = writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m);
        let pts: Vec<String> = (0..=kmax as u32).map(|k| format!("{:.1},{:.1}", x(k as f64), y(k as f64 * sf))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="firebrick"/>"#, pts.join(" "));
        let _ = writeln!(s, r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="steelblue"/>"#, x(0.0), y(g), x(kmax), y(g));
        if let Some(k) = self.timecost.k_star {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="4" fill="black"/>"#, x(k as f64), y(k as f64 * sf));
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">k* = {k}</text>"#, x(k as f64) + 6.0, y(k as f64 * sf) - 6.0);
        }
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" fill="steelblue">gtn</text>"#, x(kmax) - 24.0, y(g) - 4.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" fill="firebrick">sftn</text>"#, x(kmax) - 24.0, y(kmax * sf) + 14.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">students</text>"#, w / 2.0 - 20.0, h - 8.0);
        let _ = writeln!(s, r#"<text x="4" y="{:.1}">seconds</text>"#, m - 10.0);
        s.push_str("</svg>\n");
        Some(s)
    }

    /// Writes `report.json`, `report.txt` and, when both teacher kinds ran,
    /// `timecost.svg`.
    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        let put = |name: &str, body: &str| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|source| PipelineError::Io { path: p, source })
        };
        put("report.json", &serde_json::to_string_pretty(self).expect("report serializes"))?;
        put("report.txt", &self.to_table())?;
        if let Some(svg) = self.timecost_svg() {
            put("timecost.svg", &svg)?;
        }
        Ok(())
    }
}
