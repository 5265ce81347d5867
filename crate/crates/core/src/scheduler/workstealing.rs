//! Locality-first eager placement with queue balancing.
//!
//! A task is placed the moment it becomes ready, on the worker with the
//! smallest input transfer cost; worker load is not part of the cost. Load is
//! corrected afterwards by balancing, which moves queued tasks from workers
//! with more than `cores + donor_slack` tasks to workers with fewer than
//! `cores` tasks. Moves are only requests: the server retracts the task from
//! its worker and reports a [`SchedulerEvent::StealFailed`] when the task had
//! already started.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use super::{
    b_levels, Assignment, Retraction, Scheduler, SchedulerEvent, SchedulerUpdate, WorkerDescriptor,
};
use crate::model::{TaskGraph, TaskId, WorkerId};

type QueueKey = (i64, Reverse<u64>, TaskId);

/// Scheduler-side bookkeeping for one worker.
#[derive(Debug, Clone)]
pub struct WorkerView {
    pub id: WorkerId,
    pub node: String,
    pub cores: u32,
    /// Assigned tasks ordered by (priority, most recent assignment first).
    queue: BTreeSet<QueueKey>,
    owned_data: HashSet<TaskId>,
    /// Inputs of tasks assigned here, counted once per assigned consumer.
    incoming_data: HashMap<TaskId, u32>,
}

impl WorkerView {
    pub fn new(id: WorkerId, node: impl Into<String>, cores: u32) -> Self {
        WorkerView {
            id,
            node: node.into(),
            cores,
            queue: BTreeSet::new(),
            owned_data: HashSet::new(),
            incoming_data: HashMap::new(),
        }
    }

    pub fn assigned_len(&self) -> usize {
        self.queue.len()
    }

    pub fn assigned_tasks(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.queue.iter().map(|&(_, _, t)| t)
    }

    pub fn owns(&self, task: TaskId) -> bool {
        self.owned_data.contains(&task)
    }

    pub fn add_owned(&mut self, task: TaskId) {
        self.owned_data.insert(task);
    }

    /// Whether the output of `task` is present or will arrive for another
    /// assigned task.
    pub fn expects(&self, task: TaskId) -> bool {
        self.owned_data.contains(&task) || self.incoming_data.contains_key(&task)
    }

    pub fn add_incoming(&mut self, task: TaskId) {
        *self.incoming_data.entry(task).or_insert(0) += 1;
    }

    pub fn remove_incoming(&mut self, task: TaskId) {
        if let Some(count) = self.incoming_data.get_mut(&task) {
            *count -= 1;
            if *count == 0 {
                self.incoming_data.remove(&task);
            }
        }
    }

    /// Pushes a task into the queue without touching data bookkeeping.
    pub fn push_assigned(&mut self, task: TaskId, priority: i64, seq: u64) {
        self.queue.insert((priority, Reverse(seq), task));
    }
}

/// Bytes that would have to move for `inputs` to be available on `worker`.
///
/// Inputs the worker holds or already expects cost nothing, inputs held by
/// another worker on the same node cost `same_node_factor` per byte, anything
/// else costs one per byte. The worker's load does not enter the cost.
pub fn transfer_cost(
    inputs: &[TaskId],
    worker: &WorkerView,
    size_of: impl Fn(TaskId) -> u64,
    held_on_node: impl Fn(TaskId, &str) -> bool,
    same_node_factor: f64,
) -> f64 {
    inputs
        .iter()
        .map(|&input| {
            let weight = if worker.expects(input) {
                0.0
            } else if held_on_node(input, &worker.node) {
                same_node_factor
            } else {
                1.0
            };
            weight * size_of(input) as f64
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TaskState {
    Waiting,
    Ready,
    Assigned(WorkerId),
    Finished,
    Failed,
}

#[derive(Debug)]
struct TaskInfo {
    inputs: Vec<TaskId>,
    consumers: Vec<TaskId>,
    priority: i64,
    unfinished_inputs: usize,
    state: TaskState,
    size: u64,
    locations: Vec<WorkerId>,
    seq: u64,
    /// A retraction failed, so the task is running or done on its worker.
    started: bool,
}

pub struct WorkStealingScheduler {
    same_node_factor: f64,
    donor_slack: usize,
    tasks: HashMap<TaskId, TaskInfo>,
    workers: BTreeMap<WorkerId, WorkerView>,
    ready: VecDeque<TaskId>,
    /// Retractions not yet confirmed: task -> (from, to).
    pending: HashMap<TaskId, (WorkerId, WorkerId)>,
    next_seq: u64,
}

impl WorkStealingScheduler {
    pub fn new(same_node_factor: f64, donor_slack: usize) -> Self {
        WorkStealingScheduler {
            same_node_factor,
            donor_slack,
            tasks: HashMap::new(),
            workers: BTreeMap::new(),
            ready: VecDeque::new(),
            pending: HashMap::new(),
            next_seq: 0,
        }
    }

    pub fn worker(&self, id: WorkerId) -> Option<&WorkerView> {
        self.workers.get(&id)
    }

    /// Priority assigned to a known task (its b-level).
    pub fn priority(&self, task: TaskId) -> Option<i64> {
        self.tasks.get(&task).map(|t| t.priority)
    }

    pub fn assigned_worker(&self, task: TaskId) -> Option<WorkerId> {
        match self.tasks.get(&task)?.state {
            TaskState::Assigned(w) => Some(w),
            _ => None,
        }
    }

    /// Cost of running `task` on `worker`; inputs must be finished.
    pub fn cost(&self, task: TaskId, worker: WorkerId) -> f64 {
        let info = &self.tasks[&task];
        self.cost_for(&info.inputs, &self.workers[&worker])
    }

    fn cost_for(&self, inputs: &[TaskId], worker: &WorkerView) -> f64 {
        transfer_cost(
            inputs,
            worker,
            |t| self.tasks.get(&t).map_or(0, |i| i.size),
            |t, node| {
                self.tasks.get(&t).is_some_and(|i| {
                    i.locations.iter().any(|w| self.workers.get(w).is_some_and(|v| v.node == node))
                })
            },
            self.same_node_factor,
        )
    }

    fn add_graph(&mut self, graph: TaskGraph) {
        let levels = b_levels(&graph);
        let mut consumers: HashMap<TaskId, Vec<TaskId>> = HashMap::new();
        for task in &graph.tasks {
            for &input in &task.inputs {
                consumers.entry(input).or_default().push(task.id);
            }
        }
        for task in graph.tasks {
            let ready = task.inputs.is_empty();
            let info = TaskInfo {
                unfinished_inputs: task.inputs.len(),
                consumers: consumers.remove(&task.id).unwrap_or_default(),
                inputs: task.inputs,
                priority: levels[&task.id] as i64,
                state: if ready { TaskState::Ready } else { TaskState::Waiting },
                size: 0,
                locations: Vec::new(),
                seq: 0,
                started: false,
            };
            let previous = self.tasks.insert(task.id, info);
            assert!(previous.is_none(), "task {} submitted twice", task.id);
            if ready {
                self.ready.push_back(task.id);
            }
        }
    }

    fn attach(&mut self, task: TaskId, worker: WorkerId) {
        let seq = self.next_seq;
        self.next_seq += 1;
        let info = self.tasks.get_mut(&task).expect("unknown task");
        info.state = TaskState::Assigned(worker);
        info.seq = seq;
        let view = self.workers.get_mut(&worker).expect("unknown worker");
        view.push_assigned(task, info.priority, seq);
        for &input in &info.inputs {
            view.add_incoming(input);
        }
    }

    /// Removes the task from its worker's queue; returns that worker.
    fn detach(&mut self, task: TaskId) -> Option<WorkerId> {
        let info = self.tasks.get_mut(&task)?;
        let TaskState::Assigned(worker) = info.state else { return None };
        info.state = TaskState::Ready;
        if let Some(view) = self.workers.get_mut(&worker) {
            view.queue.remove(&(info.priority, Reverse(info.seq), task));
            for &input in &info.inputs {
                view.remove_incoming(input);
            }
        }
        Some(worker)
    }

    /// Picks the worker for a ready task: minimal transfer cost, then fewest
    /// assigned tasks, then lowest id.
    fn choose_worker(&self, task: TaskId) -> Option<WorkerId> {
        let inputs = &self.tasks[&task].inputs;
        self.workers
            .values()
            .map(|w| (self.cost_for(inputs, w), w.assigned_len(), w.id))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)))
            .map(|(_, _, id)| id)
    }

    fn on_ready(&mut self, task: TaskId) -> Option<Assignment> {
        let worker = self.choose_worker(task)?;
        self.attach(task, worker);
        Some(Assignment { task, worker, priority: self.tasks[&task].priority })
    }

    fn finish(&mut self, task: TaskId, worker: WorkerId, size: u64) {
        let info = self.tasks.get(&task).unwrap_or_else(|| panic!("finished unknown task {task}"));
        if info.state == TaskState::Finished {
            return;
        }
        self.detach(task);
        self.pending.remove(&task);
        let info = self.tasks.get_mut(&task).unwrap();
        info.state = TaskState::Finished;
        info.size = size;
        if !info.locations.contains(&worker) {
            info.locations.push(worker);
        }
        let inputs = info.inputs.clone();
        let consumers = info.consumers.clone();
        if let Some(view) = self.workers.get_mut(&worker) {
            view.add_owned(task);
            for &input in &inputs {
                view.add_owned(input);
            }
        }
        if self.workers.contains_key(&worker) {
            for input in inputs {
                let locations = &mut self.tasks.get_mut(&input).unwrap().locations;
                if !locations.contains(&worker) {
                    locations.push(worker);
                }
            }
        }
        for consumer in consumers {
            let c = self.tasks.get_mut(&consumer).unwrap();
            c.unfinished_inputs -= 1;
            if c.unfinished_inputs == 0 && c.state == TaskState::Waiting {
                c.state = TaskState::Ready;
                self.ready.push_back(consumer);
            }
        }
    }

    fn fail(&mut self, task: TaskId) {
        let state = self.tasks.get(&task).unwrap_or_else(|| panic!("failed unknown task {task}")).state;
        if matches!(state, TaskState::Finished | TaskState::Failed) {
            return;
        }
        self.detach(task);
        self.pending.remove(&task);
        self.ready.retain(|&t| t != task);
        self.tasks.get_mut(&task).unwrap().state = TaskState::Failed;
    }

    fn remove_worker(&mut self, worker: WorkerId) {
        let Some(view) = self.workers.get(&worker) else { return };
        let lost: Vec<TaskId> = view.assigned_tasks().collect();
        for task in lost {
            self.fail(task);
        }
        self.workers.remove(&worker);
        for info in self.tasks.values_mut() {
            info.locations.retain(|&w| w != worker);
        }
    }

    fn steal_failed(&mut self, task: TaskId) {
        let Some((from, to)) = self.pending.remove(&task) else { return };
        if self.tasks[&task].state != TaskState::Assigned(to) {
            return;
        }
        self.detach(task);
        if self.workers.contains_key(&from) {
            self.attach(task, from);
            self.tasks.get_mut(&task).unwrap().started = true;
        } else {
            self.tasks.get_mut(&task).unwrap().state = TaskState::Failed;
        }
    }

    fn movable(&self, worker: &WorkerView) -> Option<TaskId> {
        worker
            .queue
            .iter()
            .map(|&(_, _, t)| t)
            .find(|t| !self.tasks[t].started && !self.pending.contains_key(t))
    }

    fn is_donor(&self, w: &WorkerView) -> bool {
        w.assigned_len() > w.cores as usize + self.donor_slack
    }

    /// Moves queued tasks from overloaded to underloaded workers until no
    /// such pair is left.
    pub fn balance(&mut self) -> Vec<Retraction> {
        let mut moves = Vec::new();
        loop {
            let target = self
                .workers
                .values()
                .filter(|w| w.assigned_len() < w.cores as usize)
                .max_by(|a, b| {
                    let da = a.cores as usize - a.assigned_len();
                    let db = b.cores as usize - b.assigned_len();
                    da.cmp(&db).then(b.id.cmp(&a.id))
                })
                .map(|w| w.id);
            let Some(target) = target else { break };
            let donor = self
                .workers
                .values()
                .filter(|w| self.is_donor(w))
                .filter_map(|w| self.movable(w).map(|t| (w, t)))
                .max_by(|(a, _), (b, _)| {
                    let ea = a.assigned_len() - a.cores as usize;
                    let eb = b.assigned_len() - b.cores as usize;
                    ea.cmp(&eb).then(b.id.cmp(&a.id))
                })
                .map(|(w, t)| (w.id, t));
            let Some((from, task)) = donor else { break };
            self.detach(task);
            self.attach(task, target);
            self.pending.insert(task, (from, target));
            moves.push(Retraction { task, from, to: target });
        }
        moves
    }
}

impl Scheduler for WorkStealingScheduler {
    fn name(&self) -> &'static str {
        "workstealing"
    }

    fn step(&mut self, events: Vec<SchedulerEvent>) -> SchedulerUpdate {
        if events.is_empty() {
            return SchedulerUpdate::default();
        }
        for event in events {
            match event {
                SchedulerEvent::GraphSubmitted { graph } => self.add_graph(graph),
                SchedulerEvent::TaskFinished { task, worker, size } => self.finish(task, worker, size),
                SchedulerEvent::TaskFailed { task } => self.fail(task),
                SchedulerEvent::WorkerJoined { worker: WorkerDescriptor { id, node, cores } } => {
                    self.workers.insert(id, WorkerView::new(id, node, cores));
                }
                SchedulerEvent::WorkerLeft { worker } => self.remove_worker(worker),
                SchedulerEvent::StealFailed { task } => self.steal_failed(task),
            }
        }
        let mut assignments = Vec::new();
        if !self.workers.is_empty() {
            while let Some(task) = self.ready.pop_front() {
                if self.tasks[&task].state != TaskState::Ready {
                    continue;
                }
                assignments.push(self.on_ready(task).expect("workers available"));
            }
        }
        let retractions = self.balance();
        SchedulerUpdate { assignments, retractions }
    }

    fn check_invariants(&self) -> Result<(), String> {
        let mut queued = 0usize;
        for (&id, info) in &self.tasks {
            if let TaskState::Assigned(w) = info.state {
                let view = self.workers.get(&w).ok_or(format!("task {id} on unknown worker {w}"))?;
                if !view.queue.contains(&(info.priority, Reverse(info.seq), id)) {
                    return Err(format!("task {id} missing from the queue of worker {w}"));
                }
                queued += 1;
            }
        }
        let total: usize = self.workers.values().map(WorkerView::assigned_len).sum();
        if total != queued {
            return Err(format!("{total} queue entries for {queued} assigned tasks"));
        }
        if !self.workers.is_empty() {
            if let Some(t) = self.ready.iter().find(|t| self.tasks[t].state == TaskState::Ready) {
                return Err(format!("ready task {t} left unassigned"));
            }
        }
        for (&task, &(_, to)) in &self.pending {
            if self.tasks[&task].state != TaskState::Assigned(to) {
                return Err(format!("pending retraction of task {task} does not match its state"));
            }
        }
        let underloaded = self.workers.values().any(|w| w.assigned_len() < w.cores as usize);
        let donor = self.workers.values().find(|w| self.is_donor(w) && self.movable(w).is_some());
        if let (true, Some(d)) = (underloaded, donor) {
            return Err(format!("worker {} could donate to an underloaded worker", d.id));
        }
        Ok(())
    }
}
