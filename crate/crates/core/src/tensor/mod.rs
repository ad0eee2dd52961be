//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Forward computations are recorded on a [`Tape`]; every primitive has a
//! backward rule, and [`Tape::backward`] replays them in reverse order.
//! Only scalar-with-tensor broadcasting exists: every other operand pair must
//! agree in shape exactly.

mod array;
mod gemm;
mod gradcheck;
mod ops;
mod tape;

pub use array::Tensor;
pub use gradcheck::{grad_check, grad_check_many};
pub use ops::{
    angular_margin, arc_margin, concat, conv1d, cross_entropy_with_logits, depthwise_conv2d,
    global_avg_pool, layer_norm, linear, pointwise_conv2d, COS_CLAMP,
};
pub use tape::{Tape, Var};

pub(crate) use gemm::gemm;
pub(crate) use ops::log_sum_exp;
