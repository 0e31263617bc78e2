//! Contraction certificates, symmetry analysis and simulation for nonlinear
//! dynamical networks.

pub mod certify;
pub mod expr;
pub mod linalg;
pub mod measures;
pub mod models;
pub mod model;
pub mod sampling;
pub mod symmetry;
pub mod sim;
