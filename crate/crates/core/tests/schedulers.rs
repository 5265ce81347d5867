use std::collections::{BTreeMap, HashMap, HashSet};

use dtask_core::benchgen::{gen_layered, gen_merge, gen_tree, LayeredParams};
use dtask_core::scheduler::{
    b_levels, create_scheduler, random_choose, replay_log, transfer_cost, Scheduler, SchedulerConfig, SchedulerEvent,
    SchedulerKind, SchedulerLogEntry, WorkStealingScheduler, WorkerDescriptor, WorkerView,
};
use dtask_core::{PayloadSpec, TaskGraph, TaskId, TaskSpec, WorkerId};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn joined(id: WorkerId, node: &str, cores: u32) -> SchedulerEvent {
    SchedulerEvent::WorkerJoined { worker: WorkerDescriptor { id, node: node.into(), cores } }
}

fn random_dag(tasks: usize, max_fan_in: usize, rng: &mut impl Rng) -> TaskGraph {
    let mut specs: Vec<TaskSpec> = Vec::new();
    for id in 0..tasks as u64 {
        let mut inputs = Vec::new();
        if id > 0 {
            for _ in 0..rng.random_range(0..=max_fan_in) {
                let src = rng.random_range(0..id);
                if !inputs.contains(&src) {
                    inputs.push(src);
                }
            }
        }
        specs.push(TaskSpec::new(id, inputs, PayloadSpec::sleep(1, 8)));
    }
    TaskGraph::new(specs, vec![tasks as u64 - 1])
}

/// Longest path to a sink by fixpoint relaxation over all arcs, independent of
/// any topological ordering.
fn relaxed_b_levels(graph: &TaskGraph) -> HashMap<TaskId, u32> {
    let mut level: HashMap<TaskId, u32> = graph.tasks.iter().map(|t| (t.id, 0)).collect();
    loop {
        let mut changed = false;
        for t in &graph.tasks {
            for &input in &t.inputs {
                let candidate = level[&t.id] + 1;
                if candidate > level[&input] {
                    level.insert(input, candidate);
                    changed = true;
                }
            }
        }
        if !changed {
            return level;
        }
    }
}

#[test]
fn b_levels_match_relaxation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let n = rng.random_range(1..=200);
        let fan_in = rng.random_range(0..=4);
        let graph = random_dag(n, fan_in, &mut rng);
        assert_eq!(b_levels(&graph), relaxed_b_levels(&graph));
    }
}

#[test]
fn chain_priorities_count_down() {
    let graph = TaskGraph::new(
        (0..4).map(|i| TaskSpec::new(i, if i == 0 { vec![] } else { vec![i - 1] }, PayloadSpec::sleep(1, 8))).collect(),
        vec![3],
    );
    let levels = b_levels(&graph);
    assert_eq!((0..4).map(|i| levels[&i]).collect::<Vec<_>>(), vec![3, 2, 1, 0]);
}

#[test]
fn random_choice_is_uniform_within_four_sigma() {
    let workers = [1, 2, 3, 4];
    let n = 100_000u64;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut counts = BTreeMap::new();
    for _ in 0..n {
        *counts.entry(random_choose(&workers, &mut rng).unwrap()).or_insert(0u64) += 1;
    }
    let p = 0.25;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for (&w, &c) in &counts {
        assert!((c as f64 - n as f64 * p).abs() <= 4.0 * sigma, "worker {w}: {c}");
        assert!((24_000..=26_000).contains(&c), "worker {w}: {c}");
    }
    assert_eq!(counts.len(), 4);
}

#[test]
fn random_scheduler_is_deterministic_and_needs_workers() {
    let run = |seed| {
        let mut s = create_scheduler(&SchedulerConfig { kind: SchedulerKind::Random, seed, ..Default::default() });
        let held = s.step(vec![SchedulerEvent::GraphSubmitted { graph: gen_merge(50, 0, 8) }]);
        assert!(held.assignments.is_empty());
        let mut update = s.step(vec![joined(1, "a", 1), joined(2, "a", 1), joined(3, "b", 1)]);
        update.assignments.extend(s.step(vec![SchedulerEvent::GraphSubmitted { graph: gen_tree(5) }]).assignments);
        s.check_invariants().unwrap();
        update
    };
    let a = run(9);
    assert_eq!(a.assignments.len(), 51 + 16 + 15);
    assert_eq!(a, run(9));
    assert_ne!(a, run(10));
    let single = {
        let mut s = create_scheduler(&SchedulerConfig { kind: SchedulerKind::Random, ..Default::default() });
        s.step(vec![joined(7, "a", 1), SchedulerEvent::GraphSubmitted { graph: gen_merge(20, 0, 8) }])
    };
    assert!(single.assignments.iter().all(|a| a.worker == 7));
    assert!(single.retractions.is_empty());
}

#[test]
fn transfer_cost_ignores_load() {
    let sizes: HashMap<TaskId, u64> = [(1, 1000), (2, 500)].into();
    let mut w = WorkerView::new(1, "n1", 2);
    w.add_owned(1);
    let cost = |w: &WorkerView| {
        transfer_cost(&[1, 2], w, |t| sizes[&t], |t, node| t == 2 && node == "n1", 0.1)
    };
    let before = cost(&w);
    assert!((before - 50.0).abs() < 1e-9);
    for i in 0..25 {
        w.push_assigned(100 + i, i as i64, i);
        assert_eq!(cost(&w), before);
    }
}

#[test]
fn sink_goes_to_the_worker_holding_most_input_bytes() {
    let tasks = vec![
        TaskSpec::new(0, vec![], PayloadSpec::sleep(0, 100)),
        TaskSpec::new(1, vec![], PayloadSpec::sleep(0, 400)),
        TaskSpec::new(2, vec![], PayloadSpec::sleep(0, 300)),
        TaskSpec::new(3, vec![], PayloadSpec::sleep(0, 200)),
        TaskSpec::new(4, vec![0, 1, 2, 3], PayloadSpec::sum(0)),
    ];
    let mut s = WorkStealingScheduler::new(0.1, 1);
    let nodes = ["a", "b", "c", "d"];
    let mut events: Vec<_> = (1..=4).map(|w| joined(w, nodes[w as usize - 1], 1)).collect();
    events.push(SchedulerEvent::GraphSubmitted { graph: TaskGraph::new(tasks, vec![4]) });
    let update = s.step(events);
    let placed: HashMap<TaskId, WorkerId> = update.assignments.iter().map(|a| (a.task, a.worker)).collect();
    let finished = (0..4)
        .map(|t| SchedulerEvent::TaskFinished { task: t, worker: placed[&t], size: [100, 400, 300, 200][t as usize] })
        .collect();
    let update = s.step(finished);
    assert_eq!(update.assignments.len(), 1);
    // Oracle: evaluate the cost formula by hand for every worker.
    let expected = (1..=4u64)
        .min_by_key(|&w| (0..4u64).filter(|&t| placed[&t] != w).map(|t| [100, 400, 300, 200][t as usize]).sum::<u64>())
        .unwrap();
    assert_eq!(update.assignments[0].worker, expected);
    assert_eq!(expected, placed[&1]);
}

#[test]
fn independent_equal_tasks_never_stack_while_idle_workers_exist() {
    for workers in 1..=6u64 {
        for tasks in 1..=workers {
            let mut s = WorkStealingScheduler::new(0.1, 1);
            let mut events: Vec<_> = (1..=workers).map(|w| joined(w, "n", 1)).collect();
            let graph = TaskGraph::new((0..tasks).map(|i| TaskSpec::new(i, vec![], PayloadSpec::sleep(1, 8))).collect(), vec![]);
            events.push(SchedulerEvent::GraphSubmitted { graph });
            let update = s.step(events);
            let distinct: HashSet<_> = update.assignments.iter().map(|a| a.worker).collect();
            assert_eq!(distinct.len() as u64, tasks, "{workers} workers, {tasks} tasks");
        }
    }
}

/// Drives a scheduler with a simulated server and workers: finishes queued
/// tasks in random order, answers retractions at random (success, or failure
/// because the task already started or finished) and occasionally adds
/// workers. Checks the scheduler invariants after every step and returns the
/// recorded log.
fn simulate(kind: SchedulerKind, graph: TaskGraph, seed: u64) -> Vec<SchedulerLogEntry> {
    let config = SchedulerConfig { kind, seed, ..Default::default() };
    let mut s = create_scheduler(&config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: HashMap<TaskId, Vec<TaskId>> = graph.tasks.iter().map(|t| (t.id, t.inputs.clone())).collect();
    let total = graph.tasks.len();
    let mut log = Vec::new();
    let mut next_worker = 1;
    let mut batch: Vec<SchedulerEvent> = Vec::new();
    for _ in 0..rng.random_range(1..4) {
        batch.push(joined(next_worker, if next_worker % 2 == 0 { "even" } else { "odd" }, rng.random_range(1..=3)));
        next_worker += 1;
    }
    batch.push(SchedulerEvent::GraphSubmitted { graph });

    // Where each task is queued according to the workers.
    let mut queued: HashMap<TaskId, WorkerId> = HashMap::new();
    // Random placements made before the task was ready.
    let mut planned: HashMap<TaskId, WorkerId> = HashMap::new();
    let mut pending: HashMap<TaskId, (WorkerId, WorkerId)> = HashMap::new();
    let mut finished: HashSet<TaskId> = HashSet::new();
    let mut started: HashSet<TaskId> = HashSet::new();

    let mut guard = 0;
    while finished.len() < total {
        guard += 1;
        assert!(guard < 100_000, "simulation does not converge");
        let events = std::mem::take(&mut batch);
        let update = s.step(events.clone());
        s.check_invariants().unwrap();
        let mut seen = HashSet::new();
        for a in &update.assignments {
            assert!(seen.insert(a.task), "task {} assigned twice in one update", a.task);
            assert!(!finished.contains(&a.task));
            assert!(a.worker < next_worker);
            match kind {
                SchedulerKind::Random => {
                    assert!(planned.insert(a.task, a.worker).is_none());
                }
                SchedulerKind::WorkStealing => {
                    assert!(inputs[&a.task].iter().all(|i| finished.contains(i)), "task {} not ready", a.task);
                    assert!(queued.insert(a.task, a.worker).is_none(), "task {} queued twice", a.task);
                }
            }
        }
        for r in &update.retractions {
            assert_eq!(queued.get(&r.task), Some(&r.from));
            assert!(pending.insert(r.task, (r.from, r.to)).is_none());
        }
        log.push(SchedulerLogEntry { events, update });

        if kind == SchedulerKind::Random {
            let ready: Vec<TaskId> = planned
                .keys()
                .copied()
                .filter(|t| !queued.contains_key(t) && inputs[t].iter().all(|i| finished.contains(i)))
                .collect();
            for t in ready {
                queued.insert(t, planned[&t]);
            }
        }

        // Pick what happens next in the simulated cluster.
        let mut actions = rng.random_range(1..=3);
        while actions > 0 {
            actions -= 1;
            let roll = rng.random_range(0..100);
            if roll < 5 && next_worker < 8 {
                batch.push(joined(next_worker, "late", rng.random_range(1..=2)));
                next_worker += 1;
            } else if roll < 40 && !pending.is_empty() {
                let mut keys: Vec<_> = pending.keys().copied().collect();
                keys.sort_unstable();
                let task = keys[rng.random_range(0..keys.len())];
                let (from, to) = pending.remove(&task).unwrap();
                if finished.contains(&task) || started.contains(&task) || rng.random_bool(0.3) {
                    started.insert(task);
                    batch.push(SchedulerEvent::StealFailed { task });
                } else {
                    assert_eq!(queued.insert(task, to), Some(from));
                }
            } else {
                let mut keys: Vec<_> = queued.keys().copied().collect();
                keys.sort_unstable();
                if keys.is_empty() {
                    continue;
                }
                let task = keys[rng.random_range(0..keys.len())];
                let worker = queued.remove(&task).unwrap();
                started.insert(task);
                finished.insert(task);
                batch.push(SchedulerEvent::TaskFinished { task, worker, size: rng.random_range(1..2000) });
            }
        }
        if batch.is_empty() && queued.is_empty() && pending.is_empty() && finished.len() < total {
            panic!("nothing queued but {} tasks unfinished", total - finished.len());
        }
    }
    log
}

#[test]
fn work_stealing_invariants_hold_on_random_runs() {
    for seed in 0..40 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let graph = random_dag(rng.random_range(5..150), 3, &mut rng);
        let config = SchedulerConfig { kind: SchedulerKind::WorkStealing, seed, ..Default::default() };
        let log = simulate(SchedulerKind::WorkStealing, graph, seed);
        let report = replay_log(&config, &log).unwrap();
        assert_eq!(report.steps, log.len());
    }
}

#[test]
fn work_stealing_balances_wide_graphs() {
    let graph = gen_layered(&LayeredParams {
        tasks: 400,
        deps: 700,
        levels: 4,
        mean_duration_ms: 1.0,
        duration_jitter_ms: 0.0,
        mean_output_bytes: 100.0,
        output_jitter_bytes: 50.0,
        seed: 5,
    })
    .unwrap();
    let log = simulate(SchedulerKind::WorkStealing, graph, 77);
    let config = SchedulerConfig::default();
    let report = replay_log(&config, &log).unwrap();
    assert!(report.assignments >= 400);
}

#[test]
fn random_scheduler_runs_are_replayable() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = random_dag(rng.random_range(5..200), 3, &mut rng);
        let log = simulate(SchedulerKind::Random, graph, seed);
        let config = SchedulerConfig { kind: SchedulerKind::Random, seed, ..Default::default() };
        let report = replay_log(&config, &log).unwrap();
        assert_eq!(report.retractions, 0);
    }
}

#[test]
fn balancing_example_one_core_donor() {
    let mut s = WorkStealingScheduler::new(0.1, 1);
    s.step(vec![joined(1, "a", 1)]);
    s.step(vec![SchedulerEvent::GraphSubmitted {
        graph: TaskGraph::new((0..10).map(|i| TaskSpec::new(i, vec![], PayloadSpec::sleep(1, 8))).collect(), vec![]),
    }]);
    assert_eq!(s.worker(1).unwrap().assigned_len(), 10);
    let update = s.step(vec![joined(2, "a", 1)]);
    // B becomes underloaded with zero tasks; one move fills its single core.
    assert_eq!(update.retractions.len(), 1);
    assert_eq!((update.retractions[0].from, update.retractions[0].to), (1, 2));
    s.check_invariants().unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scheduler_updates_are_deterministic(seed in any::<u64>(), n in 5usize..80) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = random_dag(n, 3, &mut rng);
        for kind in [SchedulerKind::WorkStealing, SchedulerKind::Random] {
            let a = simulate(kind, graph.clone(), seed);
            let b = simulate(kind, graph.clone(), seed);
            prop_assert_eq!(a, b);
        }
    }
}
