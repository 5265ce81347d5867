//! Task placement policies.
//!
//! A scheduler is a pure state machine: it consumes batches of
//! [`SchedulerEvent`]s and answers each batch with one [`SchedulerUpdate`].
//! It keeps its own copy of the task graph and worker state and never looks
//! at the server's bookkeeping, which lets the server run it on a separate
//! thread and exchange only owned values over queues.

mod blevel;
mod random;
mod workstealing;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::{TaskGraph, TaskId, WorkerId};

pub use blevel::b_levels;
pub use random::{random_choose, RandomScheduler};
pub use workstealing::{transfer_cost, WorkStealingScheduler, WorkerView};

pub const DEFAULT_SAME_NODE_FACTOR: f64 = 0.1;
pub const DEFAULT_DONOR_SLACK: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerDescriptor {
    pub id: WorkerId,
    pub node: String,
    pub cores: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SchedulerEvent {
    GraphSubmitted { graph: TaskGraph },
    TaskFinished { task: TaskId, worker: WorkerId, size: u64 },
    /// The task ended in error; it will never finish.
    TaskFailed { task: TaskId },
    WorkerJoined { worker: WorkerDescriptor },
    WorkerLeft { worker: WorkerId },
    /// A retraction requested earlier could not be carried out.
    StealFailed { task: TaskId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub task: TaskId,
    pub worker: WorkerId,
    /// Higher runs first.
    pub priority: i64,
}

/// Request to move a queued task from one worker to another.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Retraction {
    pub task: TaskId,
    pub from: WorkerId,
    pub to: WorkerId,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerUpdate {
    pub assignments: Vec<Assignment>,
    pub retractions: Vec<Retraction>,
}

impl SchedulerUpdate {
    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty() && self.retractions.is_empty()
    }
}

pub trait Scheduler: Send {
    fn name(&self) -> &'static str;

    fn step(&mut self, events: Vec<SchedulerEvent>) -> SchedulerUpdate;

    /// Verifies the internal invariants that must hold between steps.
    fn check_invariants(&self) -> Result<(), String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchedulerKind {
    WorkStealing,
    Random,
}

impl SchedulerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SchedulerKind::WorkStealing => "workstealing",
            SchedulerKind::Random => "random",
        }
    }
}

impl fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchedulerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "workstealing" | "ws" => Ok(SchedulerKind::WorkStealing),
            "random" => Ok(SchedulerKind::Random),
            other => Err(format!("unknown scheduler `{other}` (expected workstealing or random)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub kind: SchedulerKind,
    pub seed: u64,
    pub same_node_factor: f64,
    pub donor_slack: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            kind: SchedulerKind::WorkStealing,
            seed: 0,
            same_node_factor: DEFAULT_SAME_NODE_FACTOR,
            donor_slack: DEFAULT_DONOR_SLACK,
        }
    }
}

pub fn create_scheduler(config: &SchedulerConfig) -> Box<dyn Scheduler> {
    match config.kind {
        SchedulerKind::WorkStealing => {
            Box::new(WorkStealingScheduler::new(config.same_node_factor, config.donor_slack))
        }
        SchedulerKind::Random => Box::new(RandomScheduler::new(config.seed)),
    }
}

/// One scheduler step as recorded by the server: the event batch and the
/// update produced for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerLogEntry {
    pub events: Vec<SchedulerEvent>,
    pub update: SchedulerUpdate,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReplayReport {
    pub steps: usize,
    pub assignments: usize,
    pub retractions: usize,
    pub steal_failed_events: usize,
}

/// Feeds recorded event batches to a fresh scheduler, checking after every
/// step that the invariants hold and that the update matches the recorded one.
pub fn replay_log(
    config: &SchedulerConfig,
    entries: &[SchedulerLogEntry],
) -> Result<ReplayReport, String> {
    let mut scheduler = create_scheduler(config);
    let mut report = ReplayReport::default();
    for (i, entry) in entries.iter().enumerate() {
        report.steal_failed_events += entry
            .events
            .iter()
            .filter(|e| matches!(e, SchedulerEvent::StealFailed { .. }))
            .count();
        let update = scheduler.step(entry.events.clone());
        scheduler.check_invariants().map_err(|e| format!("step {i}: {e}"))?;
        if update != entry.update {
            return Err(format!("step {i}: replayed update differs from the recorded one"));
        }
        report.steps += 1;
        report.assignments += update.assignments.len();
        report.retractions += update.retractions.len();
    }
    Ok(report)
}
