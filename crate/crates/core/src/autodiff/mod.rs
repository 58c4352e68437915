//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Every model computation is recorded on a [`Graph`] as it runs; calling
//! [`Graph::backward`] on a scalar node sweeps the record in reverse and
//! leaves gradients on every leaf created with [`Graph::param`].

mod gradcheck;
mod graph;
pub mod kernels;

pub use gradcheck::{check_gradients, error_floor, GradCheckReport, REL_ERROR_FLOOR, ROUNDING_ULPS};
pub use graph::{BatchStats, ComputationRecord, Graph, NormMode, OpRecord, Var};
pub(crate) use graph::{bce_term, focal_term};
