//! Periodic orbits and their stability for linear systems with a nonideal
//! relay and a delay equal to twice the half-period.

pub mod cli;
pub mod core;
pub mod hysteresis;
pub mod integrator;
pub mod linalg;
pub mod linearization;
pub mod maps;
pub mod norms;
pub mod periodic;
pub mod quad;
pub mod spectrum;
