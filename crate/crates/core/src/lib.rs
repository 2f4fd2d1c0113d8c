//! Generic teacher networks.
//!
//! A teacher is trained against student branches grafted onto its
//! intermediate blocks. In GTN mode each branch is a path through a
//! weight-sharing supernet whose architecture is resampled every iteration
//! from a trainable categorical distribution; in SFTN mode the branches are
//! the fixed blocks of one reference student. The trained teacher is then
//! used to distill any student from the pool.
//!
//! Layout:
//!
//! - [`autodiff`]: dense tensors, parameter storage and a reverse-mode tape.
//! - [`nn`]: residual blocks, identity/zero candidates, teachers and students.
//! - [`supernet`]: candidate layers, binary gates and the gate-logit update.
//! - [`losses`]: cross-entropy, temperature KL and the composite objectives.
//! - [`train`]: optimizer, vanilla/SFTN/GTN teacher training.
//! - [`kd`]: distillation into fresh students and evaluation.
//! - [`nas`]: budgeted architecture search over the supernet.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod kd;
pub mod losses;
pub mod nas;
pub mod nn;
pub mod supernet;
pub mod train;

pub use autodiff::{Element, ParamId, ParamStore, Parameter, Tape, Tensor, Var};
pub use error::{Error, Result};
