use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    DenseResidual,
    ConvResidual,
    Identity,
    Zero,
}

/// Shape of one block. `depth` counts the linear (or 3×3 conv) layers in
/// the residual function; hidden layers have `width` units, so `width` is
/// unused at depth 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub width: usize,
    pub depth: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl BlockSpec {
    pub fn dense(width: usize, depth: usize, dim: usize) -> Self {
        Self {
            kind: BlockKind::DenseResidual,
            width,
            depth,
            in_dim: dim,
            out_dim: dim,
        }
    }

    pub fn conv(width: usize, depth: usize, channels: usize) -> Self {
        Self {
            kind: BlockKind::ConvResidual,
            width,
            depth,
            in_dim: channels,
            out_dim: channels,
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            kind: BlockKind::Identity,
            width: dim,
            depth: 1,
            in_dim: dim,
            out_dim: dim,
        }
    }

    pub fn zero(in_dim: usize, out_dim: usize) -> Self {
        Self {
            kind: BlockKind::Zero,
            width: out_dim,
            depth: 1,
            in_dim,
            out_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::InvalidBlock(format!("{self:?}: dims must be positive")));
        }
        match self.kind {
            BlockKind::Identity if self.in_dim != self.out_dim => Err(Error::InvalidBlock(format!(
                "identity needs in_dim == out_dim, got {} -> {}",
                self.in_dim, self.out_dim
            ))),
            BlockKind::DenseResidual | BlockKind::ConvResidual
                if self.width == 0 || !(1..=2).contains(&self.depth) =>
            {
                Err(Error::InvalidBlock(format!(
                    "{self:?}: width must be positive and depth 1 or 2"
                )))
            }
            _ => Ok(()),
        }
    }

    /// Layer dimensions `[in, hidden.., out]` of the residual function.
    fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.in_dim];
        dims.extend(std::iter::repeat(self.width).take(self.depth - 1));
        dims.push(self.out_dim);
        dims
    }

    /// Closed-form count of weights and biases.
    pub fn param_count(&self) -> usize {
        let taps = match self.kind {
            BlockKind::Identity | BlockKind::Zero => return 0,
            BlockKind::DenseResidual => 1,
            BlockKind::ConvResidual => CONV_KERNEL * CONV_KERNEL,
        };
        self.layer_dims()
            .windows(2)
            .map(|w| w[0] * w[1] * taps + w[1])
            .sum()
    }

    pub fn is_parametric(&self) -> bool {
        matches!(self.kind, BlockKind::DenseResidual | BlockKind::ConvResidual)
    }
}

pub const CONV_KERNEL: usize = 3;

/// Storage slot of a supernet candidate: `(layer, candidate)`.
pub type SharedKey = (usize, usize);

/// One selectable operation. Cloning a candidate aliases its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateOp {
    pub spec: BlockSpec,
    /// Weight and bias ids, interleaved per layer.
    pub params: Vec<ParamId>,
    pub shared_key: SharedKey,
}

pub(crate) fn uniform_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.random_range(-bound..bound) as f32)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Creates the block's parameters in `store`, initialised uniformly in
/// `±sqrt(1/fan_in)`.
pub fn build_block<R: Rng + ?Sized>(
    spec: &BlockSpec,
    rng: &mut R,
    store: &mut ParamStore,
    prefix: &str,
    shared_key: SharedKey,
) -> Result<CandidateOp> {
    spec.validate()?;
    let mut params = Vec::new();
    if spec.is_parametric() {
        for (i, w) in spec.layer_dims().windows(2).enumerate() {
            let (fan_in, w_shape) = match spec.kind {
                BlockKind::DenseResidual => (w[0], vec![w[0], w[1]]),
                _ => (
                    w[0] * CONV_KERNEL * CONV_KERNEL,
                    vec![w[1], w[0], CONV_KERNEL, CONV_KERNEL],
                ),
            };
            let weight = uniform_tensor(rng, &w_shape, fan_in);
            let bias = uniform_tensor(rng, &[w[1]], fan_in);
            params.push(store.insert(format!("{prefix}.l{i}.w"), weight));
            params.push(store.insert(format!("{prefix}.l{i}.b"), bias));
        }
    }
    Ok(CandidateOp {
        spec: spec.clone(),
        params,
        shared_key,
    })
}

impl CandidateOp {
    /// Identity returns `x` itself; zero returns a constant zero tensor with
    /// `out_dim` features; residual kinds return `x + F(x)` when the dims
    /// match and `F(x)` otherwise, with `F` pre-activated (ReLU before each
    /// layer).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        let feature_axis = 1;
        if shape.len() < 2 || shape[feature_axis] != self.spec.in_dim {
            return Err(shape_err(
                "candidate_forward",
                format!("{:?} block expects {} features, got {:?}", self.spec.kind, self.spec.in_dim, shape),
            ));
        }
        match self.spec.kind {
            BlockKind::Identity => Ok(x),
            BlockKind::Zero => {
                let mut out = shape;
                out[feature_axis] = self.spec.out_dim;
                Ok(tape.input(Tensor::zeros(&out)))
            }
            BlockKind::DenseResidual | BlockKind::ConvResidual => {
                let conv = self.spec.kind == BlockKind::ConvResidual;
                if conv != (shape.len() == 4) {
                    return Err(shape_err(
                        "candidate_forward",
                        format!("{:?} block cannot take input {:?}", self.spec.kind, shape),
                    ));
                }
                let mut h = x;
                for pair in self.params.chunks_exact(2) {
                    h = tape.relu(h)?;
                    let w = tape.param(store, pair[0])?;
                    let b = tape.param(store, pair[1])?;
                    h = if conv {
                        tape.conv2d(h, w, Some(b), 1, CONV_KERNEL / 2)?
                    } else {
                        let m = tape.matmul(h, w)?;
                        tape.add_row(m, b)?
                    };
                }
                if self.spec.in_dim == self.spec.out_dim {
                    tape.add(x, h)
                } else {
                    Ok(h)
                }
            }
        }
    }
}
