//! Packet-level simulator for the bandwidth brokers, plus the `bwbroker` command line.

pub mod cli;
pub mod engine;
pub mod fluid;
pub mod link;
pub mod scenario;
pub mod sim;
pub mod topology;
pub mod trace;
pub mod transport;
pub mod workload;

pub use scenario::Scenario;
pub use sim::{run, Simulator};
pub use trace::TraceSet;
