//! Core of the dtask runtime: the task graph model, the wire protocol, the
//! schedulers, benchmark graph generators and result metrics.
//!
//! Nothing in this crate does I/O beyond reading and writing streams handed
//! to it; the networked server, workers and clients live in the `dtask`
//! crate.

pub mod benchgen;
pub mod graphfile;
pub mod metrics;
pub mod model;
pub mod payload;
pub mod protocol;
pub mod scheduler;
pub mod trace;

pub use model::{
    critical_path_ms, validate_graph, DataObjectRef, GraphError, GraphStats, PayloadKind, PayloadSpec,
    TaskGraph, TaskId, TaskSpec, TaskStateKind, WorkerId,
};
