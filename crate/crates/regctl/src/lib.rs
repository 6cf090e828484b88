//! Operator tooling for a pdgate deployment: the on-disk state directory,
//! the scenario language and harness, the linkage adversary, offline log
//! verification and the `regctl` command line.

pub mod cli;
pub mod harness;
pub mod linkage;
pub mod scenario;
pub mod store;
pub mod verify;
