//! Stochastic dissipativity analysis of LTI plants with random input delays.

pub mod analysis;
pub mod cli;
pub mod lmi;
pub mod model;
pub mod network;
pub mod sim;
pub mod solver;
