//! Energy-model-aware longitudinal trajectory optimization.
//!
//! The toolkit has two halves:
//!
//! * **Offline**: turn a discrete engine/fuel map into a smooth bivariate
//!   polynomial fuel-rate model via gear optimization and least-squares
//!   fitting ([`fuel`]).
//! * **Online**: an MPC replanning loop that compares a model-agnostic QP
//!   planner against model-aware SQP/NLP planners under hard ACC gap
//!   constraints over traffic and slope predictions ([`ocp`], [`solver`],
//!   [`sim`]).

pub mod env;
pub mod fuel;
pub mod matrix;
pub mod ocp;
pub mod presets;
pub mod sim;
pub mod solver;
pub mod vehicle;
