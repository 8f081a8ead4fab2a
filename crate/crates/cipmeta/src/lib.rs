//! Metastability of the condensing reversible inclusion process.
//!
//! The crate computes the metastable hierarchy of condensed states, the
//! third-scale capacity constant `𝔎_xy` from a ladder-graph resolvent
//! equation, and brackets exact finite-N capacities between explicit
//! Dirichlet (test function) and Thomson (test flow) bounds.

pub mod config_space;
pub mod error;
pub mod graph_model;
pub mod ladder_resolvent;
pub mod potential_theory;
pub mod simulator;
pub mod test_objects;

pub use error::{Error, Result};
