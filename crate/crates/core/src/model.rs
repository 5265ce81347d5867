//! Task graph model shared by the server, the schedulers, workers and clients.
//!
//! Everything in here is a plain value type. Components exchange copies of
//! these values and never hold references into each other's state.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TaskId = u64;
pub type WorkerId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PayloadKind {
    Sleep,
    Sum,
    Const,
    Noise,
}

impl PayloadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PayloadKind::Sleep => "SLEEP",
            PayloadKind::Sum => "SUM",
            PayloadKind::Const => "CONST",
            PayloadKind::Noise => "NOISE",
        }
    }
}

impl fmt::Display for PayloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PayloadKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "SLEEP" => Ok(PayloadKind::Sleep),
            "SUM" => Ok(PayloadKind::Sum),
            "CONST" => Ok(PayloadKind::Const),
            "NOISE" => Ok(PayloadKind::Noise),
            other => Err(format!("unknown payload kind `{other}`")),
        }
    }
}

/// What a task computes. Durations are in milliseconds, sizes in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PayloadSpec {
    pub kind: PayloadKind,
    pub duration_ms: u64,
    pub output_size: u64,
}

impl PayloadSpec {
    pub fn sleep(duration_ms: u64, output_size: u64) -> Self {
        PayloadSpec { kind: PayloadKind::Sleep, duration_ms, output_size }
    }

    pub fn constant(output_size: u64) -> Self {
        PayloadSpec { kind: PayloadKind::Const, duration_ms: 0, output_size }
    }

    pub fn sum(duration_ms: u64) -> Self {
        PayloadSpec { kind: PayloadKind::Sum, duration_ms, output_size: 8 }
    }

    pub fn noise(output_size: u64) -> Self {
        PayloadSpec { kind: PayloadKind::Noise, duration_ms: 0, output_size }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: TaskId,
    pub inputs: Vec<TaskId>,
    pub payload: PayloadSpec,
    #[serde(default)]
    pub priority_hint: i64,
}

impl TaskSpec {
    pub fn new(id: TaskId, inputs: Vec<TaskId>, payload: PayloadSpec) -> Self {
        TaskSpec { id, inputs, payload, priority_hint: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskGraph {
    pub tasks: Vec<TaskSpec>,
    pub outputs: Vec<TaskId>,
}

impl TaskGraph {
    pub fn new(tasks: Vec<TaskSpec>, outputs: Vec<TaskId>) -> Self {
        TaskGraph { tasks, outputs }
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Tasks no other task depends on.
    pub fn sinks(&self) -> Vec<TaskId> {
        let consumed: BTreeSet<TaskId> =
            self.tasks.iter().flat_map(|t| t.inputs.iter().copied()).collect();
        self.tasks.iter().map(|t| t.id).filter(|id| !consumed.contains(id)).collect()
    }
}

/// Table-I style statistics of a task graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    /// #T
    pub task_count: usize,
    /// #I
    pub dep_count: usize,
    /// S, in KiB
    pub avg_output_size: f64,
    /// AD, in milliseconds
    pub avg_duration: f64,
    /// LP, arcs on the longest oriented path
    pub longest_path: usize,
}

impl GraphStats {
    /// Formats the statistics as one tab separated row: name, #T, #I, S, AD, LP.
    pub fn table_row(&self, name: &str) -> String {
        format!(
            "{}\t{}\t{}\t{:.2}\t{:.2}\t{}",
            name,
            self.task_count,
            self.dep_count,
            self.avg_output_size,
            self.avg_duration,
            self.longest_path
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("task graph is empty")]
    Empty,
    #[error("task {0} is defined more than once")]
    DuplicateTask(TaskId),
    #[error("task {task} lists input {input} more than once")]
    DuplicateInput { task: TaskId, input: TaskId },
    #[error("task {0} depends on itself")]
    SelfDependency(TaskId),
    #[error("task {task} references missing task {missing}")]
    DanglingReference { task: TaskId, missing: TaskId },
    #[error("requested output {0} is not a task of the graph")]
    DanglingOutput(TaskId),
    #[error("dependency cycle detected through task {0}")]
    CycleDetected(TaskId),
}

/// Checks the graph invariants and computes its statistics.
pub fn validate_graph(graph: &TaskGraph) -> Result<GraphStats, GraphError> {
    if graph.tasks.is_empty() {
        return Err(GraphError::Empty);
    }
    let mut index: HashMap<TaskId, usize> = HashMap::with_capacity(graph.tasks.len());
    for (i, task) in graph.tasks.iter().enumerate() {
        if index.insert(task.id, i).is_some() {
            return Err(GraphError::DuplicateTask(task.id));
        }
    }

    let mut dep_count = 0usize;
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); graph.tasks.len()];
    let mut in_degree: Vec<usize> = vec![0; graph.tasks.len()];
    for (i, task) in graph.tasks.iter().enumerate() {
        let mut seen = BTreeSet::new();
        for &input in &task.inputs {
            if input == task.id {
                return Err(GraphError::SelfDependency(task.id));
            }
            if !seen.insert(input) {
                return Err(GraphError::DuplicateInput { task: task.id, input });
            }
            let &j = index
                .get(&input)
                .ok_or(GraphError::DanglingReference { task: task.id, missing: input })?;
            consumers[j].push(i);
        }
        in_degree[i] = task.inputs.len();
        dep_count += task.inputs.len();
    }
    for &output in &graph.outputs {
        if !index.contains_key(&output) {
            return Err(GraphError::DanglingOutput(output));
        }
    }

    // Kahn's algorithm; depth[i] is the longest path (in arcs) ending at i.
    let mut stack: Vec<usize> = (0..graph.tasks.len()).filter(|&i| in_degree[i] == 0).collect();
    let mut depth = vec![0usize; graph.tasks.len()];
    let mut visited = 0usize;
    let mut longest_path = 0usize;
    while let Some(i) = stack.pop() {
        visited += 1;
        longest_path = longest_path.max(depth[i]);
        for &c in &consumers[i] {
            depth[c] = depth[c].max(depth[i] + 1);
            in_degree[c] -= 1;
            if in_degree[c] == 0 {
                stack.push(c);
            }
        }
    }
    if visited != graph.tasks.len() {
        let stuck = (0..graph.tasks.len()).find(|&i| in_degree[i] > 0).unwrap();
        return Err(GraphError::CycleDetected(graph.tasks[stuck].id));
    }

    let n = graph.tasks.len() as f64;
    let total_size: u64 = graph.tasks.iter().map(|t| t.payload.output_size).sum();
    let total_duration: u64 = graph.tasks.iter().map(|t| t.payload.duration_ms).sum();
    Ok(GraphStats {
        task_count: graph.tasks.len(),
        dep_count,
        avg_output_size: total_size as f64 / n / 1024.0,
        avg_duration: total_duration as f64 / n,
        longest_path,
    })
}

/// Sum of durations along the heaviest dependency chain, in milliseconds.
///
/// This is the makespan lower bound for a graph of SLEEP tasks on any number of
/// workers. The graph must be valid.
pub fn critical_path_ms(graph: &TaskGraph) -> u64 {
    let index: HashMap<TaskId, usize> =
        graph.tasks.iter().enumerate().map(|(i, t)| (t.id, i)).collect();
    let mut memo: Vec<Option<u64>> = vec![None; graph.tasks.len()];
    let order = topological_order(graph);
    for &i in &order {
        let task = &graph.tasks[i];
        let before = task.inputs.iter().map(|inp| memo[index[inp]].unwrap_or(0)).max().unwrap_or(0);
        memo[i] = Some(before + task.payload.duration_ms);
    }
    memo.into_iter().flatten().max().unwrap_or(0)
}

/// Indices into `graph.tasks` in dependency order. The graph must be acyclic.
pub fn topological_order(graph: &TaskGraph) -> Vec<usize> {
    let index: HashMap<TaskId, usize> =
        graph.tasks.iter().enumerate().map(|(i, t)| (t.id, i)).collect();
    let mut in_degree: Vec<usize> = graph.tasks.iter().map(|t| t.inputs.len()).collect();
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); graph.tasks.len()];
    for (i, task) in graph.tasks.iter().enumerate() {
        for input in &task.inputs {
            consumers[index[input]].push(i);
        }
    }
    let mut queue: std::collections::VecDeque<usize> =
        (0..graph.tasks.len()).filter(|&i| in_degree[i] == 0).collect();
    let mut order = Vec::with_capacity(graph.tasks.len());
    while let Some(i) = queue.pop_front() {
        order.push(i);
        for &c in &consumers[i] {
            in_degree[c] -= 1;
            if in_degree[c] == 0 {
                queue.push_back(c);
            }
        }
    }
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskStateKind {
    Waiting,
    Ready,
    Assigned,
    Running,
    Finished,
    Error,
}

impl TaskStateKind {
    /// Lifecycle transitions a task may take.
    ///
    /// Besides the ordinary lifecycle, unfinished tasks may jump straight to
    /// `Error` when an upstream task fails or its data is lost with a worker, and
    /// an `Assigned` task may finish without a separate running notification.
    pub fn can_transition(self, to: TaskStateKind) -> bool {
        use TaskStateKind::*;
        matches!(
            (self, to),
            (Waiting, Ready)
                | (Ready, Assigned)
                | (Assigned, Running)
                | (Assigned, Ready)
                | (Assigned, Finished)
                | (Running, Finished)
                | (Running, Error)
                | (Assigned, Error)
                | (Waiting, Error)
                | (Ready, Error)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, TaskStateKind::Finished | TaskStateKind::Error)
    }
}

/// A finished task output and the workers that hold a copy of it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataObjectRef {
    pub task: TaskId,
    pub size: u64,
    pub locations: BTreeSet<WorkerId>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(n: u64) -> TaskGraph {
        let tasks = (0..n)
            .map(|i| {
                let inputs = if i == 0 { vec![] } else { vec![i - 1] };
                TaskSpec::new(i, inputs, PayloadSpec::sleep(1, 8))
            })
            .collect();
        TaskGraph::new(tasks, vec![n - 1])
    }

    #[test]
    fn singleton_graph() {
        let g = TaskGraph::new(vec![TaskSpec::new(7, vec![], PayloadSpec::constant(8))], vec![7]);
        let stats = validate_graph(&g).unwrap();
        assert_eq!(stats.task_count, 1);
        assert_eq!(stats.dep_count, 0);
        assert_eq!(stats.longest_path, 0);
    }

    #[test]
    fn two_cycle_is_rejected() {
        let g = TaskGraph::new(
            vec![
                TaskSpec::new(1, vec![2], PayloadSpec::constant(8)),
                TaskSpec::new(2, vec![1], PayloadSpec::constant(8)),
            ],
            vec![],
        );
        assert!(matches!(validate_graph(&g), Err(GraphError::CycleDetected(_))));
    }

    #[test]
    fn dangling_references() {
        let g = TaskGraph::new(vec![TaskSpec::new(1, vec![5], PayloadSpec::constant(8))], vec![]);
        assert_eq!(
            validate_graph(&g),
            Err(GraphError::DanglingReference { task: 1, missing: 5 })
        );
        let g = TaskGraph::new(vec![TaskSpec::new(1, vec![], PayloadSpec::constant(8))], vec![3]);
        assert_eq!(validate_graph(&g), Err(GraphError::DanglingOutput(3)));
    }

    #[test]
    fn malformed_inputs() {
        let g = TaskGraph::new(vec![TaskSpec::new(1, vec![1], PayloadSpec::constant(8))], vec![]);
        assert_eq!(validate_graph(&g), Err(GraphError::SelfDependency(1)));
        let g = TaskGraph::new(
            vec![
                TaskSpec::new(1, vec![], PayloadSpec::constant(8)),
                TaskSpec::new(2, vec![1, 1], PayloadSpec::sum(0)),
            ],
            vec![],
        );
        assert_eq!(validate_graph(&g), Err(GraphError::DuplicateInput { task: 2, input: 1 }));
        assert_eq!(validate_graph(&TaskGraph::default()), Err(GraphError::Empty));
    }

    #[test]
    fn chain_reaches_lp_upper_bound() {
        let stats = validate_graph(&chain(6)).unwrap();
        assert_eq!(stats.longest_path, 5);
        assert_eq!(critical_path_ms(&chain(6)), 6);
    }

    #[test]
    fn averages_are_reported_in_kib_and_ms() {
        let g = TaskGraph::new(
            vec![
                TaskSpec::new(1, vec![], PayloadSpec::sleep(10, 1024)),
                TaskSpec::new(2, vec![1], PayloadSpec::sleep(30, 3072)),
            ],
            vec![2],
        );
        let stats = validate_graph(&g).unwrap();
        assert_eq!(stats.avg_output_size, 2.0);
        assert_eq!(stats.avg_duration, 20.0);
        assert_eq!(stats.table_row("x"), "x\t2\t1\t2.00\t20.00\t1");
    }

    #[test]
    fn transitions() {
        use TaskStateKind::*;
        assert!(Waiting.can_transition(Ready));
        assert!(Assigned.can_transition(Ready));
        assert!(!Ready.can_transition(Running));
        assert!(!Finished.can_transition(Ready));
        assert!(!Running.can_transition(Ready));
    }
}
