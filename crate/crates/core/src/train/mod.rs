//! Teacher training: vanilla, SFTN-style fixed branches, and GTN with
//! supernet branches and alternating θ/φ updates.

mod optim;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{clip_gradients, cosine_lr, scheduled_lr, sgd_step, OptimizerState, Schedule};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, kd_kl, loss_ct, loss_phi, LossConfig};
use crate::nn::{partition_teacher, Head, Model, Projection, TeacherNet, TeacherSpec};
use crate::supernet::{ArchitectureSample, StudentBranch, Supernet, SupernetSpec};

/// Independent RNG streams derived from one seed, so that changing how
/// one consumer draws never shifts another.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RngStream {
    TeacherInit = 0,
    BranchInit = 1,
    DataOrder = 2,
    Gates = 3,
    Split = 4,
}

pub fn stream_rng(seed: u64, stream: RngStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub schedule: Schedule,
    /// Every `alternation_period`-th iteration is a φ-step; 1 disables φ
    /// updates.
    pub alternation_period: usize,
    /// Step size of the gate-logit update.
    pub phi_lr: f64,
    /// Epochs at the start of GTN training during which φ stays fixed.
    pub phi_freeze_epochs: usize,
    /// Let branch losses backpropagate into the teacher trunk through the
    /// grafted features. Off by default: the teacher then receives branch
    /// signal only through the KL term on its logits.
    pub trunk_gradients: bool,
    /// Joint L2 bound on each step's gradients; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub loss: LossConfig,
    pub seed: u64,
    /// Number of grafted branches.
    pub branches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            schedule: Schedule::Cosine,
            alternation_period: 2,
            phi_lr: 0.1,
            phi_freeze_epochs: 0,
            trunk_gradients: false,
            grad_clip: Some(5.0),
            loss: LossConfig::default(),
            seed: 0,
            branches: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("train.learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("train.momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.alternation_period == 0 {
            return Err(Error::Config("train.alternation_period must be >= 1".into()));
        }
        if !(self.phi_lr >= 0.0 && self.phi_lr.is_finite()) {
            return Err(Error::Config(format!("train.phi_lr must be non-negative, got {}", self.phi_lr)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("train.grad_clip must be positive, got {c}")));
            }
        }
        self.loss.validate()
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        scheduled_lr(self.schedule, self.learning_rate, epoch, self.epochs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherMode {
    Vanilla,
    Sftn,
    Gtn,
}

impl TeacherMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Vanilla => "vanilla",
            Self::Sftn => "sftn",
            Self::Gtn => "gtn",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Theta,
    Phi,
}

/// A teacher with its grafted branches. Branch parameters live in their own
/// store so the bare teacher can be split off intact.
#[derive(Clone, Debug)]
pub struct BranchedTeacher {
    pub teacher: Model<TeacherNet>,
    pub branches: Vec<StudentBranch>,
    pub branch_params: ParamStore,
    pub mode: TeacherMode,
}

/// Grafts `n` branches onto `teacher`. Branch `i` attaches after teacher
/// block `i + 1` and runs supernet layers `i..depth`, so branch depths
/// decrease by one per cut point. Candidate parameters are shared by all
/// branches; gate logits, adapters and heads are per branch.
pub fn graft_branches<R: Rng + ?Sized>(
    teacher: Model<TeacherNet>,
    supernet: &SupernetSpec,
    n: usize,
    mode: TeacherMode,
    rng: &mut R,
) -> Result<BranchedTeacher> {
    if mode == TeacherMode::Vanilla || n == 0 {
        return Ok(BranchedTeacher::vanilla(teacher));
    }
    let cuts = partition_teacher(&teacher.net, n)?;
    if n > supernet.depth() {
        return Err(Error::Config(format!(
            "{n} branches need at least {n} supernet layers, have {}",
            supernet.depth()
        )));
    }
    if supernet.classes != teacher.net.spec.classes || supernet.input != teacher.net.spec.input {
        return Err(Error::Config("supernet input/classes differ from the teacher's".into()));
    }
    let shared = Supernet::build(supernet, rng)?;
    let mut params = shared.params.clone();
    let image = supernet.input.is_image();
    let width = teacher.net.spec.width;
    let mut branches = Vec::with_capacity(n);
    for (i, &attach) in cuts.iter().enumerate() {
        let adapter = (width != supernet.feature_dim).then(|| {
            Projection::adapter(rng, &mut params, &format!("branch{i}.adapter"), image, width, supernet.feature_dim)
        });
        let head = Head::build(rng, &mut params, &format!("branch{i}.head"), image, supernet.feature_dim, supernet.classes);
        branches.push(StudentBranch::new(attach, adapter, shared.layers(i..supernet.depth()), head));
    }
    Ok(BranchedTeacher {
        teacher,
        branches,
        branch_params: params,
        mode,
    })
}

/// One training-curve record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: u64,
    pub epoch: usize,
    pub phase: Phase,
    /// `L_CT` (or plain CE for vanilla) on θ-steps, mean `L_φ` on φ-steps.
    pub loss: f64,
    pub teacher_ce: f64,
    pub branch_ce: Vec<f64>,
    pub branch_kl: Vec<f64>,
    pub architectures: Vec<ArchitectureSample>,
    pub lr: f64,
    /// Parameters that received a gradient this step.
    #[serde(skip)]
    pub touched: Vec<ParamId>,
}

fn value(tape: &Tape, v: crate::autodiff::Var) -> f64 {
    tape.value(v).item().into()
}

/// Off-tape CE and KL of one branch's logits, for reporting.
fn branch_metrics(z_t: &Tensor, z_s: &Tensor, labels: &[usize], temperature: f64) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let t = tape.input(z_t.clone());
    let s = tape.input(z_s.clone());
    let ce = cross_entropy(&mut tape, s, labels)?;
    let kl = kd_kl(&mut tape, t, s, temperature)?;
    Ok((value(&tape, ce), value(&tape, kl)))
}

impl BranchedTeacher {
    pub fn vanilla(teacher: Model<TeacherNet>) -> Self {
        Self {
            teacher,
            branches: Vec::new(),
            branch_params: ParamStore::new(),
            mode: TeacherMode::Vanilla,
        }
    }

    /// Which update iteration `iteration` of `epoch` performs.
    pub fn phase(&self, iteration: u64, epoch: usize, cfg: &TrainConfig) -> Phase {
        let p = cfg.alternation_period as u64;
        let gtn = self.mode == TeacherMode::Gtn;
        if gtn && p > 1 && epoch >= cfg.phi_freeze_epochs && iteration % p == p - 1 {
            Phase::Phi
        } else {
            Phase::Theta
        }
    }

    /// One iteration of teacher conditioning. θ-steps sample every branch's
    /// gates and descend `L_CT` on the teacher and the sampled branch
    /// parameters; φ-steps sample again and move only the gate logits using
    /// each branch's `L_φ`.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        batch: &Batch,
        iteration: u64,
        epoch: usize,
        opt: &mut OptimizerState,
        cfg: &TrainConfig,
        gate_rng: &mut R,
    ) -> Result<StepRecord> {
        let phase = self.phase(iteration, epoch, cfg);
        let architectures: Vec<_> = self.branches.iter_mut().map(|b| b.sample(gate_rng, iteration)).collect();

        let mut tape = Tape::new();
        let x = tape.input(batch.inputs.clone());
        let tf = self.teacher.net.forward_features(&mut tape, &self.teacher.params, x)?;
        let teacher_ce = cross_entropy(&mut tape, tf.logits, &batch.labels)?;
        let mut zs = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let f = tf.features[b.attach - 1];
            let f = if cfg.trunk_gradients { f } else { tape.detach(f)? };
            zs.push(b.forward(&mut tape, &self.branch_params, f)?);
        }

        let z_t = tape.value(tf.logits).clone();
        let (mut branch_ce, mut branch_kl) = (Vec::new(), Vec::new());
        for &z in &zs {
            let (ce, kl) = branch_metrics(&z_t, tape.value(z), &batch.labels, cfg.loss.temperature)?;
            branch_ce.push(ce);
            branch_kl.push(kl);
        }

        let (loss, touched) = match phase {
            Phase::Theta => {
                let loss = if zs.is_empty() {
                    teacher_ce
                } else {
                    loss_ct(&mut tape, tf.logits, &zs, &batch.labels, &cfg.loss)?
                };
                let lv = value(&tape, loss);
                if !lv.is_finite() {
                    return Err(Error::NonFinite("teacher loss"));
                }
                let touched = tape.backward_into(loss, &mut [&mut self.teacher.params, &mut self.branch_params])?;
                if let Some(c) = cfg.grad_clip {
                    clip_gradients(&mut [&mut self.teacher.params, &mut self.branch_params], &touched, c)?;
                }
                sgd_step(opt, &mut self.teacher.params, &touched)?;
                sgd_step(opt, &mut self.branch_params, &touched)?;
                (lv, touched)
            }
            Phase::Phi => {
                let mut total = 0.0;
                for (b, &z) in self.branches.iter_mut().zip(&zs) {
                    let l = loss_phi(&mut tape, tf.logits, z, &batch.labels, &cfg.loss)?;
                    let lv = value(&tape, l);
                    b.update_phi(lv, cfg.phi_lr, iteration)?;
                    total += lv;
                }
                (total / zs.len() as f64, Vec::new())
            }
        };
        Ok(StepRecord {
            iteration,
            epoch,
            phase,
            loss,
            teacher_ce: value(&tape, teacher_ce),
            branch_ce,
            branch_kl,
            architectures,
            lr: opt.lr,
            touched,
        })
    }

    /// Gate distributions `p_φ` per branch and layer.
    pub fn probabilities(&self) -> Vec<Vec<Vec<f64>>> {
        self.branches
            .iter()
            .map(|b| b.layers.iter().map(|l| l.probabilities()).collect())
            .collect()
    }

    /// Drops the branches and returns the bare teacher.
    pub fn into_teacher(self) -> Model<TeacherNet> {
        self.teacher
    }
}

/// A trained teacher plus the artefacts of its run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub teacher: Model<TeacherNet>,
    /// Per-epoch `p_φ` snapshots (branch → layer → candidate); empty unless
    /// GTN.
    pub phi_history: Vec<Vec<Vec<Vec<f64>>>>,
    pub curve: Vec<StepRecord>,
    pub wall_clock: Duration,
}

/// Runs `cfg.epochs` epochs of [`BranchedTeacher::step`]. Timing covers
/// model construction and training, not dataset preparation.
pub fn train_teacher(
    cfg: &TrainConfig,
    teacher_spec: &TeacherSpec,
    supernet: Option<&SupernetSpec>,
    mode: TeacherMode,
    data: &Dataset,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyData("teacher training set"));
    }
    if data.classes != teacher_spec.classes {
        return Err(Error::ClassMismatch {
            teacher: teacher_spec.classes,
            data: data.classes,
        });
    }
    let start = Instant::now();
    let teacher = Model::new_teacher(teacher_spec, &mut stream_rng(cfg.seed, RngStream::TeacherInit))?;
    let mut model = match (mode, supernet) {
        (TeacherMode::Vanilla, _) => BranchedTeacher::vanilla(teacher),
        (_, Some(s)) => graft_branches(teacher, s, cfg.branches, mode, &mut stream_rng(cfg.seed, RngStream::BranchInit))?,
        (_, None) => return Err(Error::Config(format!("{} training needs a supernet spec", mode.name()))),
    };
    let mut order_rng = stream_rng(cfg.seed, RngStream::DataOrder);
    let mut gate_rng = stream_rng(cfg.seed, RngStream::Gates);
    let mut opt = OptimizerState::new(cfg.learning_rate, cfg.momentum);
    let mut curve = Vec::new();
    let mut phi_history = Vec::new();
    let mut iteration = 0u64;
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr_at(epoch);
        for batch in data.batches(cfg.batch_size, &mut order_rng) {
            curve.push(model.step(&batch, iteration, epoch, &mut opt, cfg, &mut gate_rng)?);
            iteration += 1;
        }
        if model.mode == TeacherMode::Gtn {
            phi_history.push(model.probabilities());
        }
    }
    Ok(TrainOutcome {
        teacher: model.into_teacher(),
        phi_history,
        curve,
        wall_clock: start.elapsed(),
    })
}

pub fn train_gtn(cfg: &TrainConfig, teacher: &TeacherSpec, supernet: &SupernetSpec, data: &Dataset) -> Result<TrainOutcome> {
    train_teacher(cfg, teacher, Some(supernet), TeacherMode::Gtn, data)
}

/// Teacher conditioned on the fixed blocks of `reference`.
pub fn train_sftn(
    cfg: &TrainConfig,
    teacher: &TeacherSpec,
    supernet: &SupernetSpec,
    reference: &ArchitectureSample,
    data: &Dataset,
) -> Result<TrainOutcome> {
    if reference.len() != supernet.depth() {
        return Err(Error::Config(format!(
            "reference student has {} layers, supernet {}",
            reference.len(),
            supernet.depth()
        )));
    }
    let fixed = supernet.fixed(reference)?;
    train_teacher(cfg, teacher, Some(&fixed), TeacherMode::Sftn, data)
}

pub fn train_vanilla(cfg: &TrainConfig, teacher: &TeacherSpec, data: &Dataset) -> Result<TrainOutcome> {
    train_teacher(cfg, teacher, None, TeacherMode::Vanilla, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BlockSpec, InputShape};

    fn teacher_spec() -> TeacherSpec {
        TeacherSpec {
            input: InputShape::Vector { dim: 2 },
            classes: 2,
            width: 8,
            hidden: 8,
            block_depth: 2,
            blocks: 4,
        }
    }

    fn supernet_spec() -> SupernetSpec {
        SupernetSpec {
            input: InputShape::Vector { dim: 2 },
            classes: 2,
            feature_dim: 4,
            layers: (0..3)
                .map(|_| vec![BlockSpec::dense(8, 2, 4), BlockSpec::dense(4, 1, 4), BlockSpec::identity(4)])
                .collect(),
        }
    }

    #[test]
    fn laddered_graft_depths() {
        let t = Model::new_teacher(&teacher_spec(), &mut stream_rng(0, RngStream::TeacherInit)).unwrap();
        let bt = graft_branches(t, &supernet_spec(), 3, TeacherMode::Gtn, &mut stream_rng(0, RngStream::BranchInit)).unwrap();
        let depths: Vec<_> = bt.branches.iter().map(|b| b.layers.len()).collect();
        assert_eq!(depths, vec![3, 2, 1]);
        assert_eq!(bt.branches.iter().map(|b| b.attach).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(bt.branches.iter().all(|b| b.adapter.is_some()));
    }

    #[test]
    fn zero_branches_is_vanilla() {
        let t = Model::new_teacher(&teacher_spec(), &mut stream_rng(0, RngStream::TeacherInit)).unwrap();
        let bt = graft_branches(t, &supernet_spec(), 0, TeacherMode::Gtn, &mut stream_rng(0, RngStream::BranchInit)).unwrap();
        assert_eq!(bt.mode, TeacherMode::Vanilla);
        assert!(bt.branches.is_empty());
    }

    #[test]
    fn phase_parity() {
        let t = Model::new_teacher(&teacher_spec(), &mut stream_rng(0, RngStream::TeacherInit)).unwrap();
        let bt = graft_branches(t, &supernet_spec(), 2, TeacherMode::Gtn, &mut stream_rng(0, RngStream::BranchInit)).unwrap();
        let cfg = TrainConfig::default();
        let phases: Vec<_> = (0..4).map(|i| bt.phase(i, 0, &cfg)).collect();
        assert_eq!(phases, vec![Phase::Theta, Phase::Phi, Phase::Theta, Phase::Phi]);
        let frozen = TrainConfig { phi_freeze_epochs: 1, ..cfg.clone() };
        assert_eq!(bt.phase(1, 0, &frozen), Phase::Theta);
        assert_eq!(bt.phase(1, 1, &frozen), Phase::Phi);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
