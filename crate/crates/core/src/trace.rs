//! Server event trace: one line per task event,
//! `<monotonic_ns> <task_id> <event> [<worker_id>]`, and an auditor that
//! replays a trace against the task lifecycle rules.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use crate::model::{TaskId, TaskStateKind, WorkerId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TraceEvent {
    Waiting,
    Ready,
    Assigned,
    Running,
    Finished,
    Error,
    StealRequest,
    StealOk,
    StealFailed,
    Placed,
    Released,
}

impl TraceEvent {
    const NAMES: [(TraceEvent, &'static str); 11] = [
        (TraceEvent::Waiting, "waiting"),
        (TraceEvent::Ready, "ready"),
        (TraceEvent::Assigned, "assigned"),
        (TraceEvent::Running, "running"),
        (TraceEvent::Finished, "finished"),
        (TraceEvent::Error, "error"),
        (TraceEvent::StealRequest, "steal_request"),
        (TraceEvent::StealOk, "steal_ok"),
        (TraceEvent::StealFailed, "steal_failed"),
        (TraceEvent::Placed, "placed"),
        (TraceEvent::Released, "released"),
    ];

    pub fn as_str(self) -> &'static str {
        Self::NAMES.iter().find(|(e, _)| *e == self).unwrap().1
    }
}

impl FromStr for TraceEvent {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::NAMES
            .iter()
            .find(|(_, name)| *name == s)
            .map(|(e, _)| *e)
            .ok_or_else(|| format!("unknown trace event `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    pub time_ns: u64,
    pub task: TaskId,
    pub event: TraceEvent,
    pub worker: Option<WorkerId>,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.time_ns, self.task, self.event.as_str())?;
        if let Some(w) = self.worker {
            write!(f, " {w}")?;
        }
        Ok(())
    }
}

impl FromStr for TraceRecord {
    type Err = String;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let mut parts = line.split_whitespace();
        let mut next = |what: &str| parts.next().ok_or_else(|| format!("missing {what} in `{line}`"));
        let time_ns = next("timestamp")?.parse().map_err(|e| format!("bad timestamp: {e}"))?;
        let task = next("task id")?.parse().map_err(|e| format!("bad task id: {e}"))?;
        let event = next("event")?.parse()?;
        let worker = match parts.next() {
            Some(w) => Some(w.parse().map_err(|e| format!("bad worker id: {e}"))?),
            None => None,
        };
        Ok(TraceRecord { time_ns, task, event, worker })
    }
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>, String> {
    text.lines().filter(|l| !l.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone, Default)]
pub struct AuditReport {
    pub tasks: usize,
    pub violations: Vec<String>,
    pub steal_requests: usize,
    pub steal_ok: usize,
    pub steal_failed: usize,
    /// Successful retractions per donor worker.
    pub moved_away: BTreeMap<WorkerId, usize>,
    pub final_states: BTreeMap<&'static str, usize>,
    /// Tasks executed per worker.
    pub finished_on: BTreeMap<WorkerId, usize>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

struct TaskTrack {
    state: TaskStateKind,
    worker: Option<WorkerId>,
    steal_from: Option<WorkerId>,
}

fn state_name(s: TaskStateKind) -> &'static str {
    match s {
        TaskStateKind::Waiting => "waiting",
        TaskStateKind::Ready => "ready",
        TaskStateKind::Assigned => "assigned",
        TaskStateKind::Running => "running",
        TaskStateKind::Finished => "finished",
        TaskStateKind::Error => "error",
    }
}

fn transition(track: &mut TaskTrack, to: TaskStateKind, msgs: &mut Vec<String>) -> bool {
    if track.state.can_transition(to) {
        track.state = to;
        true
    } else {
        msgs.push(format!("illegal transition {} -> {}", state_name(track.state), state_name(to)));
        false
    }
}

fn step(r: &TraceRecord, tasks: &mut HashMap<TaskId, TaskTrack>, report: &mut AuditReport, msgs: &mut Vec<String>) {
    use TaskStateKind::*;
    if r.event == TraceEvent::Waiting {
        if tasks.insert(r.task, TaskTrack { state: Waiting, worker: None, steal_from: None }).is_some() {
            msgs.push("registered twice".into());
        }
        return;
    }
    let Some(track) = tasks.get_mut(&r.task) else {
        msgs.push(format!("{} before registration", r.event.as_str()));
        return;
    };
    match r.event {
        TraceEvent::Waiting => unreachable!(),
        TraceEvent::Ready => {
            transition(track, Ready, msgs);
        }
        TraceEvent::Assigned => {
            if track.state == Assigned || track.state == Running {
                msgs.push(format!("assigned to {:?} while still queued on {:?}", r.worker, track.worker));
            } else if transition(track, Assigned, msgs) {
                track.worker = r.worker;
            }
        }
        TraceEvent::Running => {
            transition(track, Running, msgs);
        }
        TraceEvent::Finished => {
            if track.worker != r.worker {
                msgs.push(format!("finished on {:?} but queued on {:?}", r.worker, track.worker));
            }
            if transition(track, Finished, msgs) {
                if let Some(w) = r.worker {
                    *report.finished_on.entry(w).or_default() += 1;
                }
            }
        }
        TraceEvent::Error => {
            if !track.state.is_terminal() {
                track.state = Error;
            } else {
                msgs.push(format!("error after {}", state_name(track.state)));
            }
        }
        TraceEvent::StealRequest => {
            report.steal_requests += 1;
            if track.steal_from.is_some() {
                msgs.push("second retraction while one is pending".into());
            } else if track.state != Assigned || track.worker != r.worker {
                msgs.push("retraction requested from a worker not holding the task".into());
            }
            track.steal_from = r.worker;
        }
        TraceEvent::StealOk => {
            report.steal_ok += 1;
            if track.steal_from.take().is_none() || track.worker != r.worker {
                msgs.push("retraction confirmed without a matching request".into());
            }
            if transition(track, Ready, msgs) {
                if let Some(w) = r.worker {
                    *report.moved_away.entry(w).or_default() += 1;
                }
                track.worker = None;
            }
        }
        TraceEvent::StealFailed => {
            report.steal_failed += 1;
            track.steal_from = None;
        }
        TraceEvent::Placed | TraceEvent::Released => {
            if track.state != Finished {
                msgs.push(format!("{} before the task finished", r.event.as_str()));
            }
        }
    }
}

/// Replays a complete trace and reports every rule it breaks:
///
/// * states only follow legal lifecycle transitions;
/// * a task is assigned only from the ready state, so it is never queued on
///   two workers at once, and a retracted task goes back to ready only after
///   its worker confirmed the retraction;
/// * every retraction request is closed by exactly one `steal_ok` or
///   `steal_failed`;
/// * at the end of the trace no task is left ready but unassigned.
pub fn audit(records: &[TraceRecord]) -> AuditReport {
    let mut report = AuditReport::default();
    let mut tasks: HashMap<TaskId, TaskTrack> = HashMap::new();
    for r in records {
        let mut msgs: Vec<String> = Vec::new();
        step(r, &mut tasks, &mut report, &mut msgs);
        report.violations.extend(msgs.into_iter().map(|m| format!("task {}: {m}", r.task)));
    }
    report.tasks = tasks.len();
    let mut ids: Vec<_> = tasks.keys().copied().collect();
    ids.sort_unstable();
    for id in ids {
        let track = &tasks[&id];
        *report.final_states.entry(state_name(track.state)).or_default() += 1;
        if track.state == TaskStateKind::Ready {
            report.violations.push(format!("task {id}: ready but never assigned"));
        }
        if track.steal_from.is_some() {
            report.violations.push(format!("task {id}: retraction never answered"));
        }
    }
    report
}
