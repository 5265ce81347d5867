//! Synthetic benchmark task graphs.
//!
//! `merge`, `merge_slow` and `tree` have exact, analytically known task
//! counts. `layered` approximates the shape of the other workloads (task and
//! dependency counts, depth, average duration and output size) with a seeded
//! random layered DAG.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{PayloadKind, PayloadSpec, TaskGraph, TaskId, TaskSpec};

/// Output size of merge and tree tasks, in bytes (0.027 KiB).
pub const SMALL_OUTPUT: u64 = 28;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BenchGenError {
    #[error("infeasible parameters: {0}")]
    InfeasibleParameters(String),
    #[error("bad graph family `{0}`")]
    BadFamily(String),
}

/// `n` independent tasks followed by one task depending on all of them.
pub fn gen_merge(n: u64, duration_ms: u64, output_size: u64) -> TaskGraph {
    assert!(n >= 1, "merge needs at least one source task");
    let mut tasks: Vec<TaskSpec> =
        (0..n).map(|i| TaskSpec::new(i, vec![], PayloadSpec::sleep(duration_ms, output_size))).collect();
    tasks.push(TaskSpec::new(n, (0..n).collect(), PayloadSpec::sleep(duration_ms, output_size)));
    TaskGraph::new(tasks, vec![n])
}

/// Binary reduction tree with `2^(n-1)` leaves and depth `n - 1`, so that
/// `n = 15` yields 32767 tasks. Leaves are CONST tasks and inner nodes SUM
/// tasks, so the root holds `2^(n-1) * 0x4242424242424242` (wrapping).
pub fn gen_tree(n: u32) -> TaskGraph {
    assert!((1..=40).contains(&n), "tree height parameter out of range");
    let leaves = 1u64 << (n - 1);
    let mut tasks = Vec::with_capacity(2 * leaves as usize);
    for i in 0..leaves {
        tasks.push(TaskSpec::new(i, vec![], PayloadSpec::constant(8)));
    }
    let mut level: Vec<TaskId> = (0..leaves).collect();
    let mut next_id = leaves;
    while level.len() > 1 {
        let mut parents = Vec::with_capacity(level.len() / 2);
        for pair in level.chunks(2) {
            tasks.push(TaskSpec::new(next_id, pair.to_vec(), PayloadSpec::sum(0)));
            parents.push(next_id);
            next_id += 1;
        }
        level = parents;
    }
    TaskGraph::new(tasks, vec![level[0]])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayeredParams {
    pub tasks: usize,
    pub deps: usize,
    pub levels: usize,
    pub mean_duration_ms: f64,
    pub duration_jitter_ms: f64,
    pub mean_output_bytes: f64,
    pub output_jitter_bytes: f64,
    pub seed: u64,
}

fn level_sizes(tasks: usize, levels: usize) -> Vec<usize> {
    (0..levels).map(|l| tasks / levels + usize::from(l < tasks % levels)).collect()
}

/// Rounds `x` up or down at random so that the expected value is `x`.
fn stochastic_round(x: f64, rng: &mut impl Rng) -> u64 {
    let x = x.max(0.0);
    let floor = x.floor();
    floor as u64 + u64::from(rng.random::<f64>() < x - floor)
}

fn jittered(mean: f64, jitter: f64, rng: &mut impl Rng) -> u64 {
    let value = if jitter > 0.0 { mean + rng.random_range(-jitter..=jitter) } else { mean };
    stochastic_round(value, rng)
}

/// Random layered DAG with exactly `tasks` tasks, `deps` arcs and depth
/// `levels - 1`.
///
/// Tasks are split evenly over the levels and arcs only go from earlier to
/// later levels. Every task past the first level gets one input from the
/// level right before it, which pins the longest path; the remaining
/// dependency budget is spent on random inputs from any earlier level.
pub fn gen_layered(params: &LayeredParams) -> Result<TaskGraph, BenchGenError> {
    let LayeredParams { tasks, levels, .. } = *params;
    if tasks == 0 || levels == 0 || levels > tasks {
        return Err(BenchGenError::InfeasibleParameters(format!(
            "need 1 <= levels <= tasks, got levels={levels}, tasks={tasks}"
        )));
    }
    let sizes = level_sizes(tasks, levels);
    let mut starts = Vec::with_capacity(levels);
    let mut acc = 0usize;
    for &s in &sizes {
        starts.push(acc);
        acc += s;
    }
    let deps = if levels == 1 { 0 } else { params.deps };
    let mandatory = tasks - sizes[0];
    let max_deps: usize = (1..levels).map(|l| sizes[l] * starts[l]).sum();
    if deps < mandatory || deps > max_deps {
        return Err(BenchGenError::InfeasibleParameters(format!(
            "deps must lie in [{mandatory}, {max_deps}] for {tasks} tasks on {levels} levels, got {deps}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut inputs: Vec<Vec<TaskId>> = vec![Vec::new(); tasks];
    let mut arcs: HashSet<(usize, usize)> = HashSet::with_capacity(deps);
    let level_of = |task: usize| starts.partition_point(|&s| s <= task) - 1;

    for l in 1..levels {
        for t in starts[l]..starts[l] + sizes[l] {
            let src = starts[l - 1] + rng.random_range(0..sizes[l - 1]);
            inputs[t].push(src as TaskId);
            arcs.insert((src, t));
        }
    }

    let mut budget = deps - mandatory;
    let mut misses = 0usize;
    while budget > 0 && misses < 64 {
        let t = rng.random_range(sizes[0]..tasks);
        let src = rng.random_range(0..starts[level_of(t)]);
        if arcs.insert((src, t)) {
            inputs[t].push(src as TaskId);
            budget -= 1;
            misses = 0;
        } else {
            misses += 1;
        }
    }
    // Dense corner: fill the rest deterministically.
    'fill: for t in sizes[0]..tasks {
        for src in 0..starts[level_of(t)] {
            if budget == 0 {
                break 'fill;
            }
            if arcs.insert((src, t)) {
                inputs[t].push(src as TaskId);
                budget -= 1;
            }
        }
    }

    let graph_tasks = inputs
        .into_iter()
        .enumerate()
        .map(|(i, mut ins)| {
            ins.sort_unstable();
            let duration = jittered(params.mean_duration_ms, params.duration_jitter_ms, &mut rng);
            let size = jittered(params.mean_output_bytes, params.output_jitter_bytes, &mut rng);
            TaskSpec::new(i as TaskId, ins, PayloadSpec::sleep(duration, size))
        })
        .collect::<Vec<_>>();
    let outputs = (starts[levels - 1]..tasks).map(|t| t as TaskId).collect();
    Ok(TaskGraph::new(graph_tasks, outputs))
}

/// Same topology with deterministic arithmetic payloads: sources become
/// 8-byte CONST tasks and every other task a SUM of its inputs, keeping its
/// duration.
pub fn with_sum_payloads(graph: &TaskGraph) -> TaskGraph {
    let tasks = graph
        .tasks
        .iter()
        .map(|t| {
            let payload = if t.inputs.is_empty() {
                PayloadSpec::constant(8)
            } else {
                PayloadSpec { kind: PayloadKind::Sum, duration_ms: t.payload.duration_ms, output_size: 8 }
            };
            TaskSpec { payload, ..t.clone() }
        })
        .collect();
    TaskGraph::new(tasks, graph.outputs.clone())
}

/// A benchmark graph description such as `merge:n=10000` or
/// `layered:tasks=500,deps=900,levels=6,dur=5,size=1024,seed=3`.
#[derive(Debug, Clone, PartialEq)]
pub enum GraphFamily {
    Merge { n: u64 },
    MergeSlow { n: u64, t_ms: u64 },
    Tree { n: u32 },
    Layered(LayeredParams),
}

impl GraphFamily {
    pub fn generate(&self) -> Result<TaskGraph, BenchGenError> {
        Ok(match self {
            GraphFamily::Merge { n } => gen_merge(*n, 0, SMALL_OUTPUT),
            GraphFamily::MergeSlow { n, t_ms } => gen_merge(*n, *t_ms, SMALL_OUTPUT),
            GraphFamily::Tree { n } => gen_tree(*n),
            GraphFamily::Layered(p) => gen_layered(p)?,
        })
    }

    /// Short name in the style of the benchmark tables, e.g. `merge-10000`.
    pub fn name(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for GraphFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphFamily::Merge { n } => write!(f, "merge-{n}"),
            GraphFamily::MergeSlow { n, t_ms } => write!(f, "merge_slow-{n}-{t_ms}ms"),
            GraphFamily::Tree { n } => write!(f, "tree-{n}"),
            GraphFamily::Layered(p) => {
                write!(f, "layered-{}-{}-{}-s{}", p.tasks, p.deps, p.levels, p.seed)
            }
        }
    }
}

impl FromStr for GraphFamily {
    type Err = BenchGenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || BenchGenError::BadFamily(s.to_owned());
        let (family, params) = s.split_once(':').unwrap_or((s, ""));
        let mut values = std::collections::HashMap::new();
        for pair in params.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = pair.split_once('=').ok_or_else(bad)?;
            values.insert(k.trim(), v.trim());
        }
        let num = |key: &str| -> Result<f64, BenchGenError> {
            values.get(key).ok_or_else(bad)?.parse::<f64>().map_err(|_| bad())
        };
        let opt = |key: &str, default: f64| -> Result<f64, BenchGenError> {
            values.get(key).map_or(Ok(default), |v| v.parse::<f64>().map_err(|_| bad()))
        };
        Ok(match family {
            "merge" => GraphFamily::Merge { n: num("n")? as u64 },
            "merge_slow" | "merge-slow" => {
                GraphFamily::MergeSlow { n: num("n")? as u64, t_ms: num("t")? as u64 }
            }
            "tree" => GraphFamily::Tree { n: num("n")? as u32 },
            "layered" => GraphFamily::Layered(LayeredParams {
                tasks: num("tasks")? as usize,
                deps: num("deps")? as usize,
                levels: num("levels")? as usize,
                mean_duration_ms: opt("dur", 0.0)?,
                duration_jitter_ms: opt("dur_jitter", 0.0)?,
                mean_output_bytes: opt("size", SMALL_OUTPUT as f64)?,
                output_jitter_bytes: opt("size_jitter", 0.0)?,
                seed: opt("seed", 0.0)? as u64,
            }),
            _ => return Err(bad()),
        })
    }
}
