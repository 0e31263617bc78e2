//! Scenario files and their runner, shared by the `symcon` binary and tests.

pub mod runner;
pub mod scenario;

pub use runner::{run_scenario, Output, Report};
pub use scenario::{bundled_scenarios, Scenario};
