//! Tape-based reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! This crate is deliberately small and deterministic:
//! - all values are `f64` (`ArrayD<f64>`), so gradient checks run at full
//!   precision against central finite differences;
//! - every kernel uses fixed loop order and no threading, so repeated runs
//!   produce bit-identical results;
//! - custom fused operations (e.g. a selective-scan kernel) can be added from
//!   other crates through [`Tape::push`].
//!
//! The building blocks are [`Tape`] (the operation record), [`Var`] (a node
//! handle), [`ParamStore`] (named, ordered parameters), [`Adam`], and the
//! finite-difference [`check_gradients`] oracle.

mod check;
mod nn;
mod ops;
mod optim;
mod params;
mod tape;

pub use check::{check_gradients, relative_error, GradCheckReport, GradProbe};
pub use nn::{conv3d_raw, conv_out_len};
pub use ops::{dims2, matmul_raw, matmul_nt_raw, matmul_tn_raw, softmax_rows_raw, transpose_raw};
pub use optim::Adam;
pub use params::{BoundParams, ParamStore};
pub use tape::{Arr, BackFn, Ctx, Gradients, GradSink, NodeId, Tape, Var};
