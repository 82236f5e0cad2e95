//! Simulation of self-attention token dynamics, Wasserstein comparison of token
//! clouds, cluster detection and the associated stability bounds.

pub mod linalg;
pub mod dynamics;
pub mod transport;
pub mod clustering;
pub mod perturbation;
pub mod bounds;
pub mod experiments;
pub mod verify;
pub mod cli;
