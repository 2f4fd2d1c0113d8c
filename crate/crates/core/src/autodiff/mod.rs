//! Reverse-mode automatic differentiation over dense tensors.
//!
//! The primitive set is closed: matmul, elementwise add/sub/mul, row
//! broadcast add, scalar scale, ReLU, log, exp, batch mean, class-axis sum,
//! log-softmax, 2D convolution, global average pooling, label gather and
//! reshape. Everything else, softmax included, is composed from these.

mod params;
mod tape;
mod tensor;

pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::{Element, Tensor};

use crate::error::{Error, Result};

pub(crate) fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidTemperature(t))
    }
}

/// `log softmax(z / T)` row-wise.
pub fn log_softmax_t<F: Element>(tape: &mut Tape<F>, z: Var, temperature: f64) -> Result<Var> {
    check_temperature(temperature)?;
    let scaled = if temperature == 1.0 {
        z
    } else {
        tape.scale(z, 1.0 / temperature)?
    };
    tape.log_softmax(scaled)
}

/// Row-wise `softmax(z / T)`, via the stable log-softmax.
pub fn softmax_with_temperature<F: Element>(
    tape: &mut Tape<F>,
    z: Var,
    temperature: f64,
) -> Result<Var> {
    let ls = log_softmax_t(tape, z, temperature)?;
    tape.exp(ls)
}
