//! Numerical laboratory for the stochastic embedding of Lagrangian systems.
//!
//! The crate simulates diffusions, estimates their Nelson forward and
//! backward derivatives, evaluates the stochastic action of the natural
//! Lagrangian `L(x, v) = |v|²/2 − p` together with its first variation and
//! Euler–Lagrange residuals, and runs end-to-end scenarios checking that
//! Navier–Stokes, Euler and Stokes flows give critical processes.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod action;
pub mod error;
pub mod fields;
pub mod lab;
pub mod nelson;
pub mod paths;
pub mod residuals;
pub mod stats;

pub use error::{LabError, Result};
pub use fields::{
    exact_flow, ExactFlow, FlowSpec, FlowTag, ScalarField, SpaceTimePoint, Vector, VectorField,
};
pub use paths::{simulate, DiffusionSpec, InitialLaw, PathEnsemble, Recording};
