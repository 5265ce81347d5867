//! Distributed task-graph runtime: server, workers, client SDK and benchmark harness.

pub mod client;
pub mod harness;
pub mod net;
pub mod server;
pub mod worker;
