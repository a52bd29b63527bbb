//! Discrete-time H∞ control with event-triggered transmissions.
//!
//! - [`riccati`]: game Riccati operators, the periodic attenuation ladder and gains.
//! - [`sim`]: closed-loop simulation, traces and cost accounting.
//! - [`policies`]: controller/scheduler pairs with snapshot and restore.
//! - [`adversary`]: the disturbance generator that forces either an attenuation
//!   violation or a transmission rate of at least `1/h`.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adversary;
pub mod error;
pub mod linalg;
pub mod model;
pub mod policies;
pub mod riccati;
pub mod sim;

pub use error::{Error, Result};
pub use linalg::{Mat, Vector};
pub use model::SystemModel;
