//! Transformer and Macaron layers read as splitting integrators for a
//! multi-particle convection-diffusion ODE.
//!
//! * [`tensor`]: dense matrices with reverse-mode gradients.
//! * [`ode`]: split systems, Euler / Lie-Trotter / Strang-Marchuk steps and
//!   local-truncation-error order studies.
//! * [`layers`]: attention, position-wise FFN, Transformer and Macaron layers.
//! * [`correspondence`]: layers wrapped as vector fields and stepped by the
//!   generic integrators.
//! * [`train`]: toy copy/reverse training at matched parameter budgets.

// `!(x > 0.0)` rejects NaN; index loops mirror the matrix formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod correspondence;
pub mod error;
pub mod layers;
pub mod ode;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
