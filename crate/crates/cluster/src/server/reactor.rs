//! The server's bookkeeping state machine.
//!
//! The reactor owns the authoritative state of every task, worker, client
//! and data object. It consumes decoded protocol messages and scheduler
//! updates and produces outgoing messages, scheduler events and trace lines.
//! It performs no I/O itself, so the network loop around it stays small and
//! the state machine can be exercised directly in tests.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::time::Instant;

use dtask_core::protocol::{InputLocation, Message, ProtocolError, StateSummary, ToClient, ToServer, ToWorker};
use dtask_core::scheduler::{SchedulerEvent, SchedulerUpdate, WorkerDescriptor};
use dtask_core::trace::{TraceEvent, TraceRecord};
use dtask_core::{validate_graph, PayloadSpec, TaskGraph, TaskId, TaskSpec, TaskStateKind, WorkerId};

/// Identifies one accepted connection.
pub type ConnId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Peer {
    Unregistered,
    Worker(WorkerId),
    Client(u64),
}

struct WorkerRecord {
    conn: ConnId,
    address: String,
}

struct ClientRecord {
    /// Most recent submission, used to resolve ad-hoc result fetches.
    last_submission: Option<u64>,
}

struct TaskRecord {
    submission: u64,
    /// Id of the task in the client's graph.
    client_task: TaskId,
    inputs: Vec<TaskId>,
    payload: PayloadSpec,
    consumers: Vec<TaskId>,
    state: TaskStateKind,
    assigned_worker: Option<WorkerId>,
    /// Placement decided before the task was ready; dispatched once it is.
    scheduled: Option<(WorkerId, i64)>,
    /// Priority the task was last dispatched with.
    priority: i64,
    unfinished_inputs: usize,
    /// Consumers not yet finished or failed; the output is released at zero.
    open_consumers: usize,
    /// Target worker of an unanswered retraction request.
    retraction: Option<WorkerId>,
    is_output: bool,
    delivered: bool,
    size: u64,
    locations: BTreeSet<WorkerId>,
    released: bool,
}

struct Submission {
    client_conn: ConnId,
    client_ids: HashMap<TaskId, TaskId>,
    outputs_left: usize,
    failed: bool,
}

/// Outstanding fetch of a finished output for delivery to clients.
struct ResultFetch {
    requesters: Vec<ConnId>,
    tried: BTreeSet<WorkerId>,
    from: WorkerId,
}

/// Side effects requested by the reactor, drained by the network loop.
#[derive(Default)]
pub struct Outbox {
    pub messages: Vec<(ConnId, Message)>,
    pub events: Vec<SchedulerEvent>,
    /// Connections to close because of a protocol fault.
    pub close: Vec<ConnId>,
}

pub struct Reactor {
    start: Instant,
    trace: Option<Box<dyn Write + Send>>,
    conns: HashMap<ConnId, Peer>,
    workers: BTreeMap<WorkerId, WorkerRecord>,
    clients: HashMap<ConnId, ClientRecord>,
    tasks: HashMap<TaskId, TaskRecord>,
    submissions: HashMap<u64, Submission>,
    fetches: HashMap<TaskId, ResultFetch>,
    next_task: TaskId,
    next_worker: WorkerId,
    next_client: u64,
    next_submission: u64,
    shutdown: bool,
    pub out: Outbox,
}

fn unexpected(op: &str, reason: impl Into<String>) -> ProtocolError {
    ProtocolError::UnexpectedMessage { op: op.to_owned(), reason: reason.into() }
}

impl Reactor {
    pub fn new(trace: Option<Box<dyn Write + Send>>) -> Self {
        Reactor {
            start: Instant::now(),
            trace,
            conns: HashMap::new(),
            workers: BTreeMap::new(),
            clients: HashMap::new(),
            tasks: HashMap::new(),
            submissions: HashMap::new(),
            fetches: HashMap::new(),
            next_task: 1,
            next_worker: 1,
            next_client: 1,
            next_submission: 1,
            shutdown: false,
            out: Outbox::default(),
        }
    }

    /// True once a client asked the server to stop.
    pub fn shutdown_requested(&self) -> bool {
        self.shutdown
    }

    pub fn flush_trace(&mut self) {
        if let Some(t) = self.trace.as_mut() {
            if let Err(e) = t.flush() {
                log::error!("cannot write trace: {e}");
                self.trace = None;
            }
        }
    }

    fn trace(&mut self, task: TaskId, event: TraceEvent, worker: Option<WorkerId>) {
        if let Some(t) = self.trace.as_mut() {
            let record = TraceRecord { time_ns: self.start.elapsed().as_nanos() as u64, task, event, worker };
            if let Err(e) = writeln!(t, "{record}") {
                log::error!("cannot write trace: {e}");
                self.trace = None;
            }
        }
    }

    fn send_worker(&mut self, worker: WorkerId, msg: ToWorker) {
        if let Some(w) = self.workers.get(&worker) {
            self.out.messages.push((w.conn, msg.into_message()));
        }
    }

    fn send_client(&mut self, conn: ConnId, msg: ToClient) {
        self.out.messages.push((conn, msg.into_message()));
    }

    pub fn connected(&mut self, conn: ConnId) {
        self.conns.insert(conn, Peer::Unregistered);
    }

    /// Handles one decoded message. An error means the peer broke the
    /// protocol; the caller closes the connection.
    pub fn handle(&mut self, conn: ConnId, msg: ToServer) -> Result<(), ProtocolError> {
        let peer = *self.conns.get(&conn).ok_or_else(|| unexpected("?", "unknown connection"))?;
        match (peer, msg) {
            (Peer::Unregistered, ToServer::RegisterWorker { cores, node, address, zero }) => {
                if cores == 0 {
                    return Err(unexpected("REGISTER_WORKER", "a worker needs at least one core"));
                }
                let id = self.next_worker;
                self.next_worker += 1;
                log::info!("worker {id} joined: {cores} cores on node `{node}` at {address} (zero={zero})");
                self.conns.insert(conn, Peer::Worker(id));
                self.workers.insert(id, WorkerRecord { conn, address });
                self.send_worker(id, ToWorker::Registered { worker_id: id });
                self.out.events.push(SchedulerEvent::WorkerJoined { worker: WorkerDescriptor { id, node, cores } });
            }
            (Peer::Unregistered, ToServer::RegisterClient) => {
                let id = self.next_client;
                self.next_client += 1;
                self.conns.insert(conn, Peer::Client(id));
                self.clients.insert(conn, ClientRecord { last_submission: None });
                self.send_client(conn, ToClient::Registered { client_id: id });
            }
            (Peer::Unregistered, ToServer::Heartbeat) => {}
            (Peer::Client(_), ToServer::SubmitGraph { graph }) => self.submit(conn, graph),
            (Peer::Client(_), ToServer::FetchResult { task }) => self.fetch_result(conn, task),
            (Peer::Client(_), ToServer::Heartbeat) => {
                let summary = self.state_summary();
                let workers = self.workers.len() as u64;
                self.send_client(conn, ToClient::Heartbeat { workers, states: summary });
            }
            (Peer::Client(_), ToServer::Shutdown) => {
                log::info!("shutdown requested");
                let ids: Vec<WorkerId> = self.workers.keys().copied().collect();
                for w in ids {
                    self.send_worker(w, ToWorker::Shutdown);
                }
                self.shutdown = true;
            }
            (Peer::Worker(w), ToServer::TaskFinished { task, size }) => self.task_finished(w, task, size)?,
            (Peer::Worker(w), ToServer::TaskErred { task, error }) => self.task_erred(w, task, error)?,
            (Peer::Worker(w), ToServer::StealResponse { task, success }) => self.steal_response(w, task, success)?,
            (Peer::Worker(w), ToServer::DataPlaced { task }) => self.data_placed(w, task)?,
            (Peer::Worker(w), ToServer::DataReply { task, data }) => self.data_reply(w, task, data),
            (Peer::Worker(_), ToServer::Heartbeat) => {}
            (_, msg) => {
                let op = msg.into_message().op().map(|o| o.to_string()).unwrap_or_default();
                return Err(unexpected(&op, format!("not allowed from {peer:?}")));
            }
        }
        Ok(())
    }

    pub fn state_summary(&self) -> StateSummary {
        let mut s = StateSummary::default();
        for t in self.tasks.values() {
            match t.state {
                TaskStateKind::Waiting => s.waiting += 1,
                TaskStateKind::Ready => s.ready += 1,
                TaskStateKind::Assigned => s.assigned += 1,
                TaskStateKind::Running => s.running += 1,
                TaskStateKind::Finished => s.finished += 1,
                TaskStateKind::Error => s.error += 1,
            }
        }
        s
    }

    fn submit(&mut self, conn: ConnId, graph: TaskGraph) {
        if let Err(e) = validate_graph(&graph) {
            log::warn!("rejected graph: {e}");
            self.send_client(conn, ToClient::SubmitAck { result: Err(e.to_string()) });
            return;
        }
        let sid = self.next_submission;
        self.next_submission += 1;
        let base = self.next_task;
        self.next_task += graph.tasks.len() as u64;
        let to_internal: HashMap<TaskId, TaskId> =
            graph.tasks.iter().enumerate().map(|(i, t)| (t.id, base + i as u64)).collect();
        let outputs: BTreeSet<TaskId> = graph.outputs.iter().map(|o| to_internal[o]).collect();
        let mut client_ids = HashMap::with_capacity(graph.tasks.len());
        let mut internal_tasks = Vec::with_capacity(graph.tasks.len());
        for t in &graph.tasks {
            let id = to_internal[&t.id];
            client_ids.insert(id, t.id);
            internal_tasks.push(TaskSpec {
                id,
                inputs: t.inputs.iter().map(|i| to_internal[i]).collect(),
                payload: t.payload,
                priority_hint: t.priority_hint,
            });
        }
        for t in &internal_tasks {
            self.tasks.insert(
                t.id,
                TaskRecord {
                    submission: sid,
                    client_task: client_ids[&t.id],
                    inputs: t.inputs.clone(),
                    payload: t.payload,
                    consumers: Vec::new(),
                    state: TaskStateKind::Waiting,
                    assigned_worker: None,
                    scheduled: None,
                    priority: 0,
                    unfinished_inputs: t.inputs.len(),
                    open_consumers: 0,
                    retraction: None,
                    is_output: outputs.contains(&t.id),
                    delivered: false,
                    size: 0,
                    locations: BTreeSet::new(),
                    released: false,
                },
            );
        }
        for t in &internal_tasks {
            for input in &t.inputs {
                let rec = self.tasks.get_mut(input).unwrap();
                rec.consumers.push(t.id);
                rec.open_consumers += 1;
            }
        }
        self.submissions.insert(
            sid,
            Submission { client_conn: conn, client_ids, outputs_left: outputs.len(), failed: false },
        );
        if let Some(c) = self.clients.get_mut(&conn) {
            c.last_submission = Some(sid);
        }
        self.send_client(conn, ToClient::SubmitAck { result: Ok(sid) });
        log::info!("submission {sid}: {} tasks, {} outputs", internal_tasks.len(), outputs.len());
        for t in &internal_tasks {
            self.trace(t.id, TraceEvent::Waiting, None);
        }
        for t in &internal_tasks {
            if t.inputs.is_empty() {
                self.make_ready(t.id);
            }
        }
        self.out.events.push(SchedulerEvent::GraphSubmitted { graph: TaskGraph::new(internal_tasks, outputs.into_iter().collect()) });
    }

    fn make_ready(&mut self, task: TaskId) {
        let rec = self.tasks.get_mut(&task).unwrap();
        rec.state = TaskStateKind::Ready;
        let scheduled = rec.scheduled.take();
        self.trace(task, TraceEvent::Ready, None);
        if let Some((worker, priority)) = scheduled {
            self.dispatch(task, worker, priority);
        }
    }

    /// Sends a ready task to a worker, or fails it if the worker is gone.
    fn dispatch(&mut self, task: TaskId, worker: WorkerId, priority: i64) {
        if !self.workers.contains_key(&worker) {
            self.fail_task(task, format!("worker {worker} left before the task could be sent"));
            return;
        }
        let rec = self.tasks.get_mut(&task).unwrap();
        rec.state = TaskStateKind::Assigned;
        rec.assigned_worker = Some(worker);
        rec.priority = priority;
        let payload = rec.payload;
        let input_ids = rec.inputs.clone();
        let inputs: Vec<InputLocation> = input_ids
            .iter()
            .map(|i| InputLocation {
                task: *i,
                addresses: self.tasks[i]
                    .locations
                    .iter()
                    .filter_map(|w| self.workers.get(w).map(|r| r.address.clone()))
                    .collect(),
            })
            .collect();
        self.trace(task, TraceEvent::Assigned, Some(worker));
        self.send_worker(worker, ToWorker::AssignTask { task, payload, priority, inputs });
    }

    /// Applies one scheduler decision batch.
    pub fn apply_update(&mut self, update: SchedulerUpdate) {
        for a in update.assignments {
            let Some(rec) = self.tasks.get_mut(&a.task) else {
                log::error!("scheduler assigned unknown task {}", a.task);
                continue;
            };
            match rec.state {
                TaskStateKind::Ready if rec.assigned_worker.is_none() => self.dispatch(a.task, a.worker, a.priority),
                TaskStateKind::Waiting => rec.scheduled = Some((a.worker, a.priority)),
                TaskStateKind::Error => {}
                state => log::warn!("ignoring assignment of task {} in state {state:?}", a.task),
            }
        }
        for r in update.retractions {
            let Some(rec) = self.tasks.get_mut(&r.task) else {
                log::error!("scheduler retracted unknown task {}", r.task);
                continue;
            };
            if rec.state == TaskStateKind::Assigned && rec.assigned_worker == Some(r.from) && rec.retraction.is_none() {
                rec.retraction = Some(r.to);
                self.trace(r.task, TraceEvent::StealRequest, Some(r.from));
                self.send_worker(r.from, ToWorker::StealRequest { task: r.task });
            } else {
                // Already running, finished or gone: the retraction fails
                // without asking the worker.
                self.trace(r.task, TraceEvent::StealFailed, Some(r.from));
                self.out.events.push(SchedulerEvent::StealFailed { task: r.task });
            }
        }
    }

    fn known_task(&self, op: &str, task: TaskId) -> Result<(), ProtocolError> {
        if self.tasks.contains_key(&task) {
            Ok(())
        } else {
            Err(unexpected(op, format!("unknown task {task}")))
        }
    }

    fn task_finished(&mut self, worker: WorkerId, task: TaskId, size: u64) -> Result<(), ProtocolError> {
        self.known_task("TASK_FINISHED", task)?;
        let rec = self.tasks.get_mut(&task).unwrap();
        match rec.state {
            TaskStateKind::Finished => {
                log::warn!("duplicate completion of task {task} from worker {worker}");
                return Ok(());
            }
            TaskStateKind::Error => return Ok(()),
            TaskStateKind::Assigned | TaskStateKind::Running if rec.assigned_worker == Some(worker) => {}
            state => {
                log::warn!("worker {worker} finished task {task} it does not hold (state {state:?})");
                return Ok(());
            }
        }
        rec.state = TaskStateKind::Finished;
        rec.size = size;
        rec.locations.insert(worker);
        let consumers = rec.consumers.clone();
        let inputs = rec.inputs.clone();
        let is_output = rec.is_output;
        self.trace(task, TraceEvent::Finished, Some(worker));
        self.out.events.push(SchedulerEvent::TaskFinished { task, worker, size });
        for c in consumers {
            let crec = self.tasks.get_mut(&c).unwrap();
            crec.unfinished_inputs -= 1;
            if crec.unfinished_inputs == 0 && crec.state == TaskStateKind::Waiting {
                self.make_ready(c);
            }
        }
        for i in inputs {
            self.consumer_closed(i);
        }
        if is_output {
            let conn = self.submissions[&self.tasks[&task].submission].client_conn;
            self.request_result(task, conn);
        }
        self.maybe_release(task);
        Ok(())
    }

    fn consumer_closed(&mut self, input: TaskId) {
        let rec = self.tasks.get_mut(&input).unwrap();
        rec.open_consumers -= 1;
        self.maybe_release(input);
    }

    /// Drops a finished output from every worker once nobody needs it.
    fn maybe_release(&mut self, task: TaskId) {
        let rec = self.tasks.get_mut(&task).unwrap();
        if rec.state != TaskStateKind::Finished
            || rec.released
            || rec.open_consumers > 0
            || (rec.is_output && !rec.delivered)
            || self.fetches.contains_key(&task)
        {
            return;
        }
        let rec = self.tasks.get_mut(&task).unwrap();
        rec.released = true;
        let locations = std::mem::take(&mut rec.locations);
        for w in locations {
            self.trace(task, TraceEvent::Released, Some(w));
            self.send_worker(w, ToWorker::ReleaseData { tasks: vec![task] });
        }
    }

    fn task_erred(&mut self, worker: WorkerId, task: TaskId, error: String) -> Result<(), ProtocolError> {
        self.known_task("TASK_ERRED", task)?;
        let rec = &self.tasks[&task];
        if rec.assigned_worker != Some(worker) || rec.state.is_terminal() {
            log::warn!("ignoring error report for task {task} from worker {worker}");
            return Ok(());
        }
        log::warn!("task {task} failed on worker {worker}: {error}");
        self.fail_task(task, error);
        Ok(())
    }

    /// Marks a task and everything downstream of it as failed and tells the
    /// owning client once.
    fn fail_task(&mut self, root: TaskId, error: String) {
        let sid = self.tasks[&root].submission;
        let mut stack = vec![root];
        while let Some(task) = stack.pop() {
            let rec = self.tasks.get_mut(&task).unwrap();
            if rec.state.is_terminal() {
                continue;
            }
            rec.state = TaskStateKind::Error;
            rec.retraction = None;
            rec.scheduled = None;
            let worker = rec.assigned_worker;
            let inputs = rec.inputs.clone();
            stack.extend(rec.consumers.iter().copied());
            self.trace(task, TraceEvent::Error, worker);
            self.out.events.push(SchedulerEvent::TaskFailed { task });
            for i in inputs {
                self.consumer_closed(i);
            }
        }
        let sub = self.submissions.get_mut(&sid).unwrap();
        if !sub.failed {
            sub.failed = true;
            let conn = sub.client_conn;
            let client_task = self.tasks[&root].client_task;
            self.send_client(conn, ToClient::TaskErred { task: client_task, error });
        }
    }

    fn steal_response(&mut self, worker: WorkerId, task: TaskId, success: bool) -> Result<(), ProtocolError> {
        self.known_task("STEAL_RESPONSE", task)?;
        let rec = self.tasks.get_mut(&task).unwrap();
        let Some(target) = rec.retraction.take() else {
            if rec.state == TaskStateKind::Error {
                // The retraction was dropped when the task failed.
                return Ok(());
            }
            return Err(unexpected("STEAL_RESPONSE", format!("no retraction pending for task {task}")));
        };
        if rec.assigned_worker != Some(worker) {
            return Err(unexpected("STEAL_RESPONSE", format!("task {task} is not held by worker {worker}")));
        }
        if success {
            if rec.state != TaskStateKind::Assigned {
                return Err(unexpected("STEAL_RESPONSE", format!("task {task} retracted after it started")));
            }
            rec.state = TaskStateKind::Ready;
            rec.assigned_worker = None;
            let priority = rec.priority;
            self.trace(task, TraceEvent::StealOk, Some(worker));
            self.dispatch(task, target, priority);
        } else {
            let started = rec.state == TaskStateKind::Assigned;
            if started {
                rec.state = TaskStateKind::Running;
            }
            self.trace(task, TraceEvent::StealFailed, Some(worker));
            if started {
                self.trace(task, TraceEvent::Running, Some(worker));
            }
            self.out.events.push(SchedulerEvent::StealFailed { task });
        }
        Ok(())
    }

    fn data_placed(&mut self, worker: WorkerId, task: TaskId) -> Result<(), ProtocolError> {
        self.known_task("DATA_PLACED", task)?;
        let rec = self.tasks.get_mut(&task).unwrap();
        if rec.state != TaskStateKind::Finished {
            return Err(unexpected("DATA_PLACED", format!("task {task} has not finished")));
        }
        if rec.released {
            // A copy that arrived after the object was dropped everywhere.
            self.send_worker(worker, ToWorker::ReleaseData { tasks: vec![task] });
            return Ok(());
        }
        if rec.locations.insert(worker) {
            self.trace(task, TraceEvent::Placed, Some(worker));
        }
        Ok(())
    }

    fn fetch_result(&mut self, conn: ConnId, client_task: TaskId) {
        let found = self.clients.get(&conn).and_then(|c| c.last_submission).and_then(|sid| {
            self.submissions[&sid].client_ids.iter().find(|(_, &c)| c == client_task).map(|(&id, _)| id)
        });
        match found {
            Some(task) if self.tasks[&task].state == TaskStateKind::Finished && !self.tasks[&task].released => {
                self.request_result(task, conn)
            }
            _ => self.send_client(conn, ToClient::ResultReply { task: client_task, data: None }),
        }
    }

    /// Asks a worker holding `task` for its bytes on behalf of `conn`.
    fn request_result(&mut self, task: TaskId, conn: ConnId) {
        if let Some(f) = self.fetches.get_mut(&task) {
            f.requesters.push(conn);
            return;
        }
        let Some(&from) = self.tasks[&task].locations.iter().next() else {
            self.result_unavailable(task, vec![conn]);
            return;
        };
        self.fetches.insert(task, ResultFetch { requesters: vec![conn], tried: BTreeSet::from([from]), from });
        self.send_worker(from, ToWorker::FetchData { task });
    }

    fn data_reply(&mut self, worker: WorkerId, task: TaskId, data: Option<Vec<u8>>) {
        let Some(fetch) = self.fetches.get_mut(&task) else {
            log::warn!("unsolicited data reply for task {task} from worker {worker}");
            return;
        };
        if fetch.from != worker {
            log::warn!("data reply for task {task} from worker {worker}, expected {}", fetch.from);
            return;
        }
        match data {
            Some(bytes) => {
                let fetch = self.fetches.remove(&task).unwrap();
                self.deliver(task, fetch.requesters, Some(bytes));
            }
            None => {
                let next = self.tasks[&task].locations.iter().find(|w| !fetch.tried.contains(w)).copied();
                match next {
                    Some(w) => {
                        fetch.tried.insert(w);
                        fetch.from = w;
                        self.send_worker(w, ToWorker::FetchData { task });
                    }
                    None => {
                        let fetch = self.fetches.remove(&task).unwrap();
                        self.result_unavailable(task, fetch.requesters);
                    }
                }
            }
        }
    }

    fn result_unavailable(&mut self, task: TaskId, requesters: Vec<ConnId>) {
        let rec = &self.tasks[&task];
        let (client_task, sid, undelivered) = (rec.client_task, rec.submission, rec.is_output && !rec.delivered);
        for conn in requesters {
            if conn == self.submissions[&sid].client_conn && undelivered {
                let sub = self.submissions.get_mut(&sid).unwrap();
                if !sub.failed {
                    sub.failed = true;
                    self.send_client(conn, ToClient::TaskErred { task: client_task, error: "output data lost".into() });
                }
            } else {
                self.send_client(conn, ToClient::ResultReply { task: client_task, data: None });
            }
        }
    }

    fn deliver(&mut self, task: TaskId, requesters: Vec<ConnId>, data: Option<Vec<u8>>) {
        let rec = self.tasks.get_mut(&task).unwrap();
        let client_task = rec.client_task;
        let sid = rec.submission;
        let first_delivery = rec.is_output && !rec.delivered;
        rec.delivered = true;
        for conn in requesters {
            if self.conns.contains_key(&conn) {
                self.send_client(conn, ToClient::ResultReply { task: client_task, data: data.clone() });
            }
        }
        if first_delivery {
            let sub = self.submissions.get_mut(&sid).unwrap();
            sub.outputs_left -= 1;
            if sub.outputs_left == 0 {
                log::info!("submission {sid} delivered all outputs");
            }
        }
        self.maybe_release(task);
    }

    /// Cleans up after a connection went away.
    pub fn disconnected(&mut self, conn: ConnId) {
        match self.conns.remove(&conn) {
            Some(Peer::Worker(w)) => self.worker_left(w),
            Some(Peer::Client(_)) => {
                self.clients.remove(&conn);
            }
            _ => {}
        }
    }

    fn worker_left(&mut self, worker: WorkerId) {
        log::warn!("worker {worker} left");
        self.workers.remove(&worker);
        self.out.events.push(SchedulerEvent::WorkerLeft { worker });
        let mut ids: Vec<TaskId> = self.tasks.keys().copied().collect();
        ids.sort_unstable();
        let mut lost = Vec::new();
        let mut orphaned = Vec::new();
        for &id in &ids {
            let rec = self.tasks.get_mut(&id).unwrap();
            let queued_here = matches!(rec.state, TaskStateKind::Assigned | TaskStateKind::Running)
                && rec.assigned_worker == Some(worker);
            let planned_here = rec.scheduled.is_some_and(|(w, _)| w == worker);
            let moving_here = rec.retraction == Some(worker);
            if queued_here || planned_here || moving_here {
                lost.push(id);
            }
            if rec.state == TaskStateKind::Finished
                && rec.locations.remove(&worker)
                && rec.locations.is_empty()
                && !rec.released
            {
                orphaned.push(id);
            }
        }
        // Outputs being fetched from the departed worker: try another copy.
        let pending: Vec<TaskId> = self.fetches.iter().filter(|(_, f)| f.from == worker).map(|(&t, _)| t).collect();
        for t in pending {
            self.data_reply(worker, t, None);
        }
        for id in orphaned {
            // The only copy is gone: whatever still needs it cannot run.
            let rec = &self.tasks[&id];
            lost.extend(rec.consumers.iter().copied().filter(|c| !self.tasks[c].state.is_terminal()));
            if rec.is_output && !rec.delivered && !self.fetches.contains_key(&id) {
                let conn = self.submissions[&rec.submission].client_conn;
                self.result_unavailable(id, vec![conn]);
            }
        }
        for id in lost {
            self.fail_task(id, format!("worker {worker} was lost"));
        }
    }
}
