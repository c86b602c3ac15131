//! Deterministic simulation, workloads and trace checking for causeway.

pub mod checker;
pub mod laws;
pub mod report;
pub mod scenario;
pub mod sim;
pub mod trace;
pub mod workload;
