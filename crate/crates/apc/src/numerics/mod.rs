//! Deterministic dense-array math with reverse-mode differentiation.

pub mod array;
pub mod gradcheck;
pub mod optim;
pub mod param;
pub mod rng;
pub mod tape;

pub use array::{matmul_raw, softmax_rows_raw, transpose_raw, RealArray};
pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_FD_STEP};
pub use optim::Adam;
pub use param::{ParamSet, Parameter};
pub use rng::StreamRng;
pub use tape::{Tape, Var};
