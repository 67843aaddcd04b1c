//! Deterministic simulator of an execute-order ledger pipeline under
//! contention, with pluggable ordering strategies and a lock-aware parallel
//! assigner.

pub mod assigner;
pub mod dependency;
pub mod endorsement;
pub mod engine;
pub mod io;
pub mod ledger;
pub mod metrics;
pub mod ordering;
pub mod replay;
pub mod scenario;
pub mod workload;
