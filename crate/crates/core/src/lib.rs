//! Single-step balance recovery for a planar biped.
//!
//! Phase one tunes four gait parameters per (initial CoM velocity, step
//! position) pair with Bayesian optimization and interpolates them into a
//! continuous parameter map. Phase two sweeps that map densely, records which
//! steps succeed and how much joint torque they cost, trims the reachable set
//! with a weighted kernel SVM, and distills the cheapest steps into a quartic
//! velocity-to-step selector.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod controller;
pub mod episode;
pub mod error;
pub mod maps;
pub mod model;
pub mod paramopt;
pub mod traj;
pub mod validation;

pub use error::{Error, ModelError, Result};
