//! Adaptive tree policy optimization on a hidden-facts dialogue task.

pub mod api;
pub mod credit;
pub mod env;
pub mod model;
pub mod optim;
pub mod rng;
pub mod runner;
pub mod tree;
pub mod vocab;
