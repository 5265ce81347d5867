//! Helpers shared by the cluster integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use dtask::harness::{ClusterSpec, Launch};
use dtask_core::scheduler::{replay_log, SchedulerConfig, SchedulerKind, SchedulerLogEntry};
use dtask_core::trace::{audit, parse_trace, AuditReport};
use dtask_core::{PayloadKind, PayloadSpec, TaskGraph, TaskId, TaskSpec};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Reference evaluation of a graph on one thread, written independently of
/// the runtime's payload code: CONST fills its output with 0x42, SLEEP yields
/// zeros, NOISE yields ChaCha8 bytes seeded with the task id and SUM adds the
/// leading little-endian u64 of each input, wrapping. Returns every task's
/// output.
pub fn oracle(graph: &TaskGraph) -> HashMap<TaskId, Vec<u8>> {
    let specs: HashMap<TaskId, &TaskSpec> = graph.tasks.iter().map(|t| (t.id, t)).collect();
    let mut values: HashMap<TaskId, Vec<u8>> = HashMap::new();
    fn eval(
        id: TaskId,
        specs: &HashMap<TaskId, &TaskSpec>,
        values: &mut HashMap<TaskId, Vec<u8>>,
    ) {
        if values.contains_key(&id) {
            return;
        }
        // Iterative post-order to survive deep chains.
        let mut stack = vec![(id, false)];
        while let Some((t, expanded)) = stack.pop() {
            if values.contains_key(&t) {
                continue;
            }
            let spec = specs[&t];
            if !expanded {
                stack.push((t, true));
                for i in &spec.inputs {
                    if !values.contains_key(i) {
                        stack.push((*i, false));
                    }
                }
                continue;
            }
            let size = spec.payload.output_size as usize;
            let out = match spec.payload.kind {
                PayloadKind::Const => vec![0x42; size],
                PayloadKind::Sleep => vec![0; size],
                PayloadKind::Noise => {
                    let mut v = vec![0; size];
                    ChaCha8Rng::seed_from_u64(t).fill_bytes(&mut v);
                    v
                }
                PayloadKind::Sum => {
                    let mut acc = 0u64;
                    for i in &spec.inputs {
                        let b = &values[i];
                        let mut word = [0u8; 8];
                        word.copy_from_slice(&b[..8]);
                        acc = acc.wrapping_add(u64::from_le_bytes(word));
                    }
                    acc.to_le_bytes().to_vec()
                }
            };
            values.insert(t, out);
        }
    }
    for t in &graph.tasks {
        eval(t.id, &specs, &mut values);
    }
    values
}

/// Oracle values of the graph's outputs only.
pub fn oracle_outputs(graph: &TaskGraph) -> BTreeMap<TaskId, Vec<u8>> {
    let all = oracle(graph);
    graph.outputs.iter().map(|o| (*o, all[o].clone())).collect()
}

/// Random DAG of CONST leaves and SUM reductions with sparse, shuffled ids.
/// Every sink is an output, plus a few random interior tasks.
pub fn random_sum_graph(rng: &mut ChaCha8Rng, max_tasks: usize) -> TaskGraph {
    let n = rng.random_range(1..=max_tasks);
    let id_base: u64 = rng.random_range(0..1_000_000);
    let stride: u64 = rng.random_range(1..4);
    let ids: Vec<TaskId> = (0..n as u64).map(|i| id_base + i * stride).collect();
    let mut tasks = Vec::with_capacity(n);
    let mut has_consumer = vec![false; n];
    for i in 0..n {
        let leaf = i == 0 || rng.random_bool(0.3);
        if leaf {
            let size = rng.random_range(8..=64);
            tasks.push(TaskSpec::new(ids[i], vec![], PayloadSpec::constant(size)));
        } else {
            let fan_in = rng.random_range(1..=i.min(6));
            let mut inputs: Vec<usize> = Vec::with_capacity(fan_in);
            while inputs.len() < fan_in {
                // Bias towards recent tasks to get deeper graphs.
                let j = if rng.random_bool(0.5) { i - 1 - rng.random_range(0..i.min(20)) } else { rng.random_range(0..i) };
                if !inputs.contains(&j) {
                    inputs.push(j);
                }
            }
            for &j in &inputs {
                has_consumer[j] = true;
            }
            tasks.push(TaskSpec::new(ids[i], inputs.iter().map(|&j| ids[j]).collect(), PayloadSpec::sum(0)));
        }
    }
    let mut outputs: Vec<TaskId> = (0..n).filter(|&i| !has_consumer[i]).map(|i| ids[i]).collect();
    for _ in 0..rng.random_range(0..3) {
        let extra = ids[rng.random_range(0..n)];
        if !outputs.contains(&extra) {
            outputs.push(extra);
        }
    }
    // Submission order must not matter.
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let tasks = order.into_iter().map(|i| tasks[i].clone()).collect();
    TaskGraph::new(tasks, outputs)
}

/// Longest chain of durations in milliseconds, by memoised depth-first search.
pub fn longest_duration_path(graph: &TaskGraph) -> u64 {
    let specs: HashMap<TaskId, &TaskSpec> = graph.tasks.iter().map(|t| (t.id, t)).collect();
    let mut finish: HashMap<TaskId, u64> = HashMap::new();
    let mut best = 0;
    for t in &graph.tasks {
        let mut stack = vec![(t.id, false)];
        while let Some((id, expanded)) = stack.pop() {
            if finish.contains_key(&id) {
                continue;
            }
            let spec = specs[&id];
            if expanded {
                let start = spec.inputs.iter().map(|i| finish[i]).max().unwrap_or(0);
                finish.insert(id, start + spec.payload.duration_ms);
            } else {
                stack.push((id, true));
                stack.extend(spec.inputs.iter().filter(|i| !finish.contains_key(i)).map(|i| (*i, false)));
            }
        }
        best = best.max(finish[&t.id]);
    }
    best
}

pub fn audit_trace_file(path: &Path) -> AuditReport {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()));
    let records = parse_trace(&text).unwrap_or_else(|e| panic!("bad trace {}: {e}", path.display()));
    audit(&records)
}

pub fn read_sched_log(path: &Path) -> Vec<SchedulerLogEntry> {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()));
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("scheduler log line"))
        .collect()
}

/// Replays a scheduler log, checking invariants and determinism.
pub fn replay_file(config: &SchedulerConfig, path: &Path) -> Result<dtask_core::scheduler::ReplayReport, String> {
    replay_log(config, &read_sched_log(path))
}

pub fn spec(kind: SchedulerKind, workers: usize) -> ClusterSpec {
    ClusterSpec {
        scheduler: SchedulerConfig { kind, seed: 7, ..SchedulerConfig::default() },
        workers,
        launch: Launch::Threads,
        ..ClusterSpec::default()
    }
}
