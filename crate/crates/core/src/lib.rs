//! Keyword spotting with compact residual networks and non-local graph
//! context modules: audio front end, autodiff tensors, models, training and
//! evaluation.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::too_many_arguments,
    clippy::wrong_self_convention
)]

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod footprint;
pub mod frontend;
pub mod gcn;
pub mod kv;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
