//! Network building blocks: residual blocks and parameter-free candidates,
//! the teacher, and standalone students.

mod block;
mod net;

pub use block::{build_block, BlockKind, BlockSpec, CandidateOp, SharedKey, CONV_KERNEL};
pub use net::{
    partition_teacher, predict, student_param_count, Classifier, Conv, Head, InputShape, Linear,
    Model, Projection, StudentNet, TeacherForward, TeacherNet, TeacherSpec,
};
pub(crate) use net::shape_input;
