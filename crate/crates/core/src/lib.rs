//! Force-and-moment model predictive control for a bipedal robot modelled
//! as a single rigid body, with an external-force payload model, a dense
//! interior-point QP solver, leg kinematics, and a closed-loop simulator.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod benchmark;
pub mod check;
pub mod dynamics;
pub mod error;
pub mod kinematics;
pub mod model;
pub mod mpc;
pub mod qp;
pub mod sim;

pub use error::{Error, Result};
