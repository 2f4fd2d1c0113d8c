use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Cosine,
    Constant,
}

/// `lr₀·(1 + cos(π·t/t_max))/2`.
pub fn cosine_lr(lr0: f64, t: usize, t_max: usize) -> f64 {
    if t_max == 0 {
        return lr0;
    }
    lr0 * (1.0 + (PI * t as f64 / t_max as f64).cos()) / 2.0
}

pub fn scheduled_lr(schedule: Schedule, lr0: f64, t: usize, t_max: usize) -> f64 {
    match schedule {
        Schedule::Cosine => cosine_lr(lr0, t, t_max),
        Schedule::Constant => lr0,
    }
}

/// Momentum buffers for every parameter stepped so far.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    buffers: HashMap<ParamId, Vec<f32>>,
    pub step: u64,
    pub lr: f64,
    pub momentum: f64,
}

impl OptimizerState {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            buffers: HashMap::new(),
            step: 0,
            lr,
            momentum,
        }
    }

    pub fn buffer(&self, id: ParamId) -> Option<&[f32]> {
        self.buffers.get(&id).map(Vec::as_slice)
    }
}

/// Heavy-ball SGD on the listed parameters of `store`, then clears their
/// gradients. Ids the store does not own are skipped, so one touched list
/// can be applied to several stores. Parameters not listed keep their
/// values and momentum.
pub fn sgd_step(opt: &mut OptimizerState, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
    let lr = opt.lr as f32;
    let mu = opt.momentum as f32;
    for &id in ids {
        if !store.contains(id) {
            continue;
        }
        let p = store.get_mut(id)?;
        if mu == 0.0 {
            for (w, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *w -= lr * g;
            }
        } else {
            let buf = opt.buffers.entry(id).or_insert_with(|| vec![0.0; p.grad.len()]);
            for ((w, g), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(buf.iter_mut()) {
                *v = mu * *v + g;
                *w -= lr * *v;
            }
        }
        p.grad.data_mut().fill(0.0);
    }
    opt.step += 1;
    Ok(())
}

/// Rescales the listed gradients across all `stores` so their joint L2
/// norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(stores: &mut [&mut ParamStore], ids: &[ParamId], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0f64;
    for store in stores.iter() {
        for &id in ids {
            if store.contains(id) {
                sq += store.get(id)?.grad.data().iter().map(|g| (*g as f64).powi(2)).sum::<f64>();
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = (max_norm / norm) as f32;
        for store in stores.iter_mut() {
            for &id in ids {
                if store.contains(id) {
                    store.get_mut(id)?.grad.data_mut().iter_mut().for_each(|g| *g *= k);
                }
            }
        }
    }
    Ok(norm)
}
