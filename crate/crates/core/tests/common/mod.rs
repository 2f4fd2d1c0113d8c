#![allow(dead_code)]

use gtn_core::data::Dataset;
use gtn_core::nn::{BlockSpec, InputShape, TeacherSpec};
use gtn_core::supernet::SupernetSpec;
use gtn_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Interleaved 2-D spiral arms with angular jitter.
pub fn spiral(classes: usize, per_class: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for c in 0..classes {
        for i in 0..per_class {
            let r = (i + 1) as f64 / per_class as f64;
            let t = 4.0 * (c as f64 + r) + noise * rng.random_range(-1.0..1.0);
            x.extend([r * t.sin(), r * t.cos()]);
            y.push(c);
        }
    }
    Dataset::new(Tensor::from_f64(&[y.len(), 2], &x).unwrap(), y, classes, InputShape::Vector { dim: 2 }).unwrap()
}

/// Two well separated clusters along the first axis.
pub fn separable(per_class: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for c in 0..2 {
        let centre = if c == 0 { -3.0 } else { 3.0 };
        for _ in 0..per_class {
            x.extend([centre + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            y.push(c);
        }
    }
    Dataset::new(Tensor::from_f64(&[y.len(), 2], &x).unwrap(), y, 2, InputShape::Vector { dim: 2 }).unwrap()
}

pub fn teacher_spec(classes: usize) -> TeacherSpec {
    TeacherSpec {
        input: InputShape::Vector { dim: 2 },
        classes,
        width: 16,
        hidden: 32,
        block_depth: 2,
        blocks: 4,
    }
}

/// 3 layers × 3 candidates.
pub fn supernet_spec(classes: usize) -> SupernetSpec {
    SupernetSpec {
        input: InputShape::Vector { dim: 2 },
        classes,
        feature_dim: 8,
        layers: (0..3)
            .map(|_| vec![BlockSpec::dense(16, 2, 8), BlockSpec::dense(8, 1, 8), BlockSpec::identity(8)])
            .collect(),
    }
}
