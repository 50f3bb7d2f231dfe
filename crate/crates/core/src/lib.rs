//! Simulation, estimation and learning core for a tendon-driven hand with
//! rolling-contact joints.

// `!(x > 0.0)` style checks are there to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod env;
pub mod estimator;
pub mod handmodel;
pub mod kinematics;
pub mod motorlog;
pub mod rl;
pub mod rngs;
pub mod runtime;
pub mod stats;
pub mod tendon;
pub mod trajectory;
