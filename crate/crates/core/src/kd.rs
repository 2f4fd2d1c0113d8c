//! Distilling fresh pool students under a frozen teacher.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, loss_dkd, loss_kd, LossConfig};
use crate::nn::{predict, Classifier, Model, StudentNet, TeacherNet};
use crate::supernet::{derive_student, ArchitectureSample, SupernetSpec};
use crate::train::{clip_gradients, sgd_step, stream_rng, OptimizerState, RngStream, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KdMethod {
    /// Labels only.
    None,
    /// `CE + α·T²·KL`.
    Vanilla,
    /// `CE` plus decoupled target/non-target KD.
    Dkd,
}

impl std::str::FromStr for KdMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "no-kd" => Ok(Self::None),
            "vanilla" | "vanilla-kd" => Ok(Self::Vanilla),
            "dkd" => Ok(Self::Dkd),
            other => Err(Error::Config(format!("unknown kd method '{other}'"))),
        }
    }
}

pub struct DistillJob<'a> {
    pub teacher: &'a Model<TeacherNet>,
    pub supernet: &'a SupernetSpec,
    pub student: &'a ArchitectureSample,
    pub method: KdMethod,
    pub cfg: &'a TrainConfig,
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub student: Model<StudentNet>,
    pub accuracy: f64,
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub wall_clock: Duration,
}

/// Trains a freshly initialised student and reports its accuracy on
/// `test`. The teacher runs forward only, on its own tape, so none of its
/// parameters can receive a gradient.
pub fn distill(job: &DistillJob<'_>, train: &Dataset, test: &Dataset) -> Result<DistillOutcome> {
    let cfg = job.cfg;
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyData("distillation training set"));
    }
    let tc = job.teacher.classes();
    if tc != train.classes || tc != job.supernet.classes {
        return Err(Error::ClassMismatch {
            teacher: tc,
            data: train.classes,
        });
    }
    let start = Instant::now();
    let mut student = derive_student(job.supernet, job.student, &mut stream_rng(cfg.seed, RngStream::BranchInit))?;
    let mut order_rng = stream_rng(cfg.seed, RngStream::DataOrder);
    let mut opt = OptimizerState::new(cfg.learning_rate, cfg.momentum);
    let loss_cfg = match job.method {
        KdMethod::None => LossConfig { alpha: 0.0, ..cfg.loss },
        _ => cfg.loss,
    };
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.lr = crate::train::scheduled_lr(cfg.schedule, cfg.learning_rate, epoch, cfg.epochs);
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in train.batches(cfg.batch_size, &mut order_rng) {
            let mut tape = Tape::new();
            let x = tape.input(batch.inputs.clone());
            let z_s = student.net.forward(&mut tape, &student.params, x)?;
            let loss = match job.method {
                KdMethod::None => {
                    // Same graph as vanilla KD with α = 0; the teacher is
                    // never consulted.
                    let z_t = tape.input(tape.value(z_s).clone());
                    loss_kd(&mut tape, z_s, z_t, &batch.labels, &loss_cfg)?
                }
                KdMethod::Vanilla => {
                    let z_t = tape.input(predict(job.teacher, &batch.inputs)?);
                    loss_kd(&mut tape, z_s, z_t, &batch.labels, &loss_cfg)?
                }
                KdMethod::Dkd => {
                    let z_t = tape.input(predict(job.teacher, &batch.inputs)?);
                    let ce = cross_entropy(&mut tape, z_s, &batch.labels)?;
                    let dkd = loss_dkd(&mut tape, z_s, z_t, &batch.labels, &loss_cfg)?;
                    tape.add(ce, dkd)?
                }
            };
            let lv: f64 = tape.value(loss).item().into();
            if !lv.is_finite() {
                return Err(Error::NonFinite("distillation loss"));
            }
            let touched = tape.backward_into(loss, &mut [&mut student.params])?;
            if let Some(c) = cfg.grad_clip {
                clip_gradients(&mut [&mut student.params], &touched, c)?;
            }
            sgd_step(&mut opt, &mut student.params, &touched)?;
            total += lv * batch.labels.len() as f64;
            count += batch.labels.len();
        }
        epoch_loss.push(total / count as f64);
    }
    let wall_clock = start.elapsed();
    let accuracy = evaluate(&student, test)?;
    Ok(DistillOutcome {
        student,
        accuracy,
        epoch_loss,
        wall_clock,
    })
}

const EVAL_CHUNK: usize = 512;

/// Fraction of rows whose argmax logit equals the label.
pub fn evaluate<C: Classifier + ?Sized>(model: &C, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyData("evaluation set"));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let logits = predict(model, &data.inputs.select_rows(chunk))?;
        correct += logits
            .argmax_rows()
            .iter()
            .zip(chunk)
            .filter(|(p, &i)| **p == data.labels[i])
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Percentage-point improvement over vanilla KD; both arguments in percent.
pub fn delta_vs_vanilla(acc_method: f64, acc_vanilla_kd: f64) -> f64 {
    acc_method - acc_vanilla_kd
}
