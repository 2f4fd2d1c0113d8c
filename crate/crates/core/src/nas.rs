//! Budgeted single-path architecture search over the supernet.
//!
//! The supernet is truncated to its first `max_layers` layers and trained
//! standalone: θ-steps minimise CE of the sampled path on the training
//! split, φ-steps feed the validation CE of a freshly sampled path to the
//! score-function update. The result is the per-layer argmax of `p_φ`.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::supernet::{standalone_forward, ArchitectureSample, StudentBranch, Supernet, SupernetSpec};
use crate::train::{clip_gradients, scheduled_lr, sgd_step, stream_rng, OptimizerState, RngStream, TrainConfig};

/// Share of the search data held out for φ-steps.
pub const VALIDATION_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchBudget {
    pub max_layers: usize,
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub sample: ArchitectureSample,
    /// Final `p_φ` per layer.
    pub probabilities: Vec<Vec<f64>>,
    pub param_count: usize,
    /// Set when the argmax sample exceeded the previous budget's count and
    /// was replaced by the most probable sample under that count.
    #[serde(default)]
    pub capped: bool,
}

fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Searches a `budget.max_layers`-layer student. `cfg` supplies batch size,
/// learning rate, momentum, schedule and the φ step size; its epochs and
/// seed are replaced by the budget's.
pub fn search(spec: &SupernetSpec, data: &Dataset, budget: SearchBudget, cfg: &TrainConfig) -> Result<SearchOutcome> {
    let spec = spec.truncated(budget.max_layers)?;
    let cfg = TrainConfig {
        epochs: budget.epochs,
        seed: budget.seed,
        ..cfg.clone()
    };
    cfg.validate()?;
    if data.classes != spec.classes {
        return Err(Error::ClassMismatch {
            teacher: spec.classes,
            data: data.classes,
        });
    }
    let (train, val) = data.split(1.0 - VALIDATION_FRACTION, &mut stream_rng(cfg.seed, RngStream::Split))?;
    let mut supernet = Supernet::build(&spec, &mut stream_rng(cfg.seed, RngStream::BranchInit))?;
    let mut branch = StudentBranch::new(
        0,
        Some(supernet.stem.clone()),
        supernet.layers(0..spec.depth()),
        supernet.head.clone(),
    );
    let mut order_rng = stream_rng(cfg.seed, RngStream::DataOrder);
    let mut gate_rng = stream_rng(cfg.seed, RngStream::Gates);
    let mut opt = OptimizerState::new(cfg.learning_rate, cfg.momentum);
    let mut val_batches = Vec::new();
    let mut iteration = 0u64;
    for epoch in 0..cfg.epochs {
        opt.lr = scheduled_lr(cfg.schedule, cfg.learning_rate, epoch, cfg.epochs);
        for batch in train.batches(cfg.batch_size, &mut order_rng) {
            branch.sample(&mut gate_rng, iteration);
            let mut tape = Tape::new();
            if iteration % 2 == 0 {
                let x = tape.input(batch.inputs);
                let z = standalone_forward(&supernet, &branch, &mut tape, x)?;
                let loss = cross_entropy(&mut tape, z, &batch.labels)?;
                let touched = tape.backward_into(loss, &mut [&mut supernet.params])?;
                if let Some(c) = cfg.grad_clip {
                    clip_gradients(&mut [&mut supernet.params], &touched, c)?;
                }
                sgd_step(&mut opt, &mut supernet.params, &touched)?;
            } else {
                if val_batches.is_empty() {
                    val_batches = val.batches(cfg.batch_size, &mut order_rng);
                }
                let vb = val_batches.pop().expect("refilled above");
                let x = tape.input(vb.inputs);
                let z = standalone_forward(&supernet, &branch, &mut tape, x)?;
                let loss = cross_entropy(&mut tape, z, &vb.labels)?;
                let lv: f64 = tape.value(loss).item().into();
                branch.update_phi(lv, cfg.phi_lr, iteration)?;
            }
            iteration += 1;
        }
    }
    let probabilities: Vec<Vec<f64>> = branch.layers.iter().map(|l| l.probabilities()).collect();
    let sample = ArchitectureSample(probabilities.iter().map(|p| argmax(p)).collect());
    let param_count = spec.student_param_count(&sample)?;
    Ok(SearchOutcome {
        sample,
        probabilities,
        param_count,
        capped: false,
    })
}

/// Most probable sample (by joint `p_φ`) whose student has at most `cap`
/// parameters. Exhaustive over the product of candidate sets.
pub fn most_probable_within(spec: &SupernetSpec, probabilities: &[Vec<f64>], cap: usize) -> Result<Option<ArchitectureSample>> {
    let base = spec.student_param_count(&ArchitectureSample(vec![0; spec.depth()]))?
        - spec.layers.iter().map(|l| l[0].param_count()).sum::<usize>();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut idx = vec![0usize; spec.depth()];
    loop {
        let count = base + idx.iter().zip(&spec.layers).map(|(&j, l)| l[j].param_count()).sum::<usize>();
        if count <= cap {
            let logp: f64 = idx.iter().zip(probabilities).map(|(&j, p)| p[j].ln()).sum();
            if best.as_ref().is_none_or(|b| logp > b.0) {
                best = Some((logp, idx.clone()));
            }
        }
        // Odometer increment, last layer fastest.
        let mut l = idx.len();
        loop {
            if l == 0 {
                return Ok(best.map(|b| ArchitectureSample(b.1)));
            }
            l -= 1;
            idx[l] += 1;
            if idx[l] < spec.layers[l].len() {
                break;
            }
            idx[l] = 0;
        }
    }
}

/// One search per budget, in the given order, all with the same seed and
/// epoch count. Budgets must be non-increasing; each result's parameter
/// count is capped by the previous one's.
pub fn budget_variants(
    spec: &SupernetSpec,
    data: &Dataset,
    budgets: &[usize],
    epochs: usize,
    seed: u64,
    cfg: &TrainConfig,
) -> Result<Vec<SearchOutcome>> {
    if let Some(w) = budgets.windows(2).find(|w| w[1] > w[0]) {
        return Err(Error::InvalidBudget {
            budget: w[1],
            depth: w[0],
        });
    }
    let mut out: Vec<SearchOutcome> = Vec::with_capacity(budgets.len());
    for &max_layers in budgets {
        let mut found = search(
            spec,
            data,
            SearchBudget {
                max_layers,
                epochs,
                seed,
            },
            cfg,
        )?;
        if let Some(prev) = out.last() {
            if found.param_count > prev.param_count {
                let t = spec.truncated(max_layers)?;
                // A prefix of the previous sample always fits, so a candidate exists.
                let sample = most_probable_within(&t, &found.probabilities, prev.param_count)?
                    .expect("truncated previous sample fits the cap");
                found.param_count = t.student_param_count(&sample)?;
                found.sample = sample;
                found.capped = true;
            }
        }
        out.push(found);
    }
    Ok(out)
}
