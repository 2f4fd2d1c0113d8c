use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::InputShape;

/// Labelled examples stored as flat rows `[N, input.flat_len()]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub input: InputShape,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize, input: InputShape) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        let flat = input.flat_len();
        if inputs.rank() != 2 || inputs.shape()[1] != flat || inputs.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                detail: format!(
                    "inputs {:?} vs {} labels of width {flat}",
                    inputs.shape(),
                    labels.len()
                ),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            inputs,
            labels,
            classes,
            input,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows at `idx`, in that order. Panics on an empty or out-of-range
    /// selection.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            input: self.input,
        }
    }

    pub fn as_batch(&self) -> Batch {
        Batch {
            inputs: self.inputs.clone(),
            labels: self.labels.clone(),
        }
    }

    /// One epoch of shuffled mini-batches; the last batch may be short.
    pub fn batches<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<Batch> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order
            .chunks(batch_size.max(1))
            .map(|idx| Batch {
                inputs: self.inputs.select_rows(idx),
                labels: idx.iter().map(|&i| self.labels[i]).collect(),
            })
            .collect()
    }

    /// Number of batches [`Dataset::batches`] yields.
    pub fn batch_count(&self, batch_size: usize) -> usize {
        self.len().div_ceil(batch_size.max(1))
    }

    /// Seeded shuffle, then the first `round(fraction·N)` rows and the rest.
    pub fn split<R: Rng + ?Sized>(&self, fraction: f64, rng: &mut R) -> Result<(Self, Self)> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        let cut = ((self.len() as f64) * fraction).round() as usize;
        if cut == 0 || cut >= self.len() {
            return Err(Error::EmptyData("split leaves an empty side"));
        }
        Ok((self.subset(&order[..cut]), self.subset(&order[cut..])))
    }
}
