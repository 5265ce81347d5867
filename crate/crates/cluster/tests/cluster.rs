mod common;

use std::time::Duration;

use common::{audit_trace_file, longest_duration_path, oracle_outputs, random_sum_graph, replay_file, spec};
use dtask::client::ClientError;
use dtask::harness::{run_benchmark_runs, run_repetition, BenchConfig, LocalCluster};
use dtask::worker::ZERO_OBJECT;
use dtask_core::benchgen::{gen_merge, gen_tree, with_sum_payloads};
use dtask_core::metrics::{RunStatus, WorkerMode};
use dtask_core::scheduler::SchedulerKind;
use dtask_core::{PayloadSpec, TaskGraph, TaskSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench(graph: TaskGraph, name: &str, cluster: dtask::harness::ClusterSpec, dir: &std::path::Path) -> BenchConfig {
    BenchConfig {
        graph,
        graph_name: name.into(),
        cluster,
        reps: 1,
        timeout: Duration::from_secs(60),
        artifacts: Some(dir.to_path_buf()),
    }
}

#[test]
fn random_graphs_match_the_oracle_under_both_schedulers() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..4 {
        let graph = random_sum_graph(&mut rng, 300);
        let expected = oracle_outputs(&graph);
        for kind in [SchedulerKind::WorkStealing, SchedulerKind::Random] {
            let cluster = spec(kind, 3);
            let config = bench(graph.clone(), &format!("g{i}"), cluster.clone(), dir.path());
            let run = run_repetition(&config, 0).unwrap();
            assert_eq!(run.record.status, RunStatus::Ok, "{:?}", run.error);
            assert_eq!(run.outputs, expected, "graph {i} under {kind}");
            let report = audit_trace_file(run.trace.as_ref().unwrap());
            assert!(report.is_clean(), "{:?}", report.violations);
            replay_file(&cluster.scheduler, run.sched_log.as_ref().unwrap()).unwrap();
        }
    }
}

#[test]
fn tree_of_constants_reduces_to_the_folded_sum() {
    let graph = with_sum_payloads(&gen_tree(9));
    let expected = oracle_outputs(&graph);
    let cluster = LocalCluster::start(&spec(SchedulerKind::WorkStealing, 4)).unwrap();
    let mut client = cluster.client().unwrap();
    let result = client.run(&graph).unwrap();
    assert_eq!(result.outputs, expected);
    drop(client);
    cluster.shutdown().unwrap();
}

#[test]
fn failing_task_is_reported_to_the_client() {
    // SUM needs at least eight input bytes; the 4-byte constant makes task 1 fail.
    let graph = TaskGraph::new(
        vec![
            TaskSpec::new(0, vec![], PayloadSpec::constant(4)),
            TaskSpec::new(1, vec![0], PayloadSpec::sum(0)),
            TaskSpec::new(2, vec![1], PayloadSpec::sum(0)),
            TaskSpec::new(3, vec![], PayloadSpec::constant(8)),
        ],
        vec![2, 3],
    );
    let dir = tempfile::tempdir().unwrap();
    let run = run_repetition(&bench(graph, "erring", spec(SchedulerKind::WorkStealing, 2), dir.path()), 0).unwrap();
    assert_eq!(run.record.status, RunStatus::Failed);
    let error = run.error.unwrap();
    assert!(error.contains("task 1 failed"), "{error}");
    let report = audit_trace_file(run.trace.as_ref().unwrap());
    assert!(report.is_clean(), "{:?}", report.violations);
    assert_eq!(report.final_states.get("error"), Some(&2));
}

#[test]
fn failure_is_named_through_the_client_error() {
    let graph = TaskGraph::new(
        vec![TaskSpec::new(5, vec![], PayloadSpec::constant(2)), TaskSpec::new(6, vec![5], PayloadSpec::sum(0))],
        vec![6],
    );
    let cluster = LocalCluster::start(&spec(SchedulerKind::Random, 1)).unwrap();
    let mut client = cluster.client().unwrap();
    match client.run(&graph) {
        Err(ClientError::TaskFailed { task, .. }) => assert_eq!(task, 6),
        other => panic!("expected a task failure, got {other:?}"),
    }
    drop(client);
    cluster.shutdown().unwrap();
}

#[test]
fn empty_output_list_completes_right_away() {
    let mut graph = gen_merge(5, 0, 8);
    graph.outputs.clear();
    let cluster = LocalCluster::start(&spec(SchedulerKind::WorkStealing, 1)).unwrap();
    let mut client = cluster.client().unwrap();
    let result = client.run(&graph).unwrap();
    assert!(result.outputs.is_empty());
    assert!(result.makespan < Duration::from_secs(1));
    drop(client);
    cluster.shutdown().unwrap();
}

#[test]
fn invalid_graph_is_rejected_locally() {
    let graph = TaskGraph::new(vec![TaskSpec::new(1, vec![2], PayloadSpec::constant(8))], vec![1]);
    let cluster = LocalCluster::start(&spec(SchedulerKind::WorkStealing, 1)).unwrap();
    let mut client = cluster.client().unwrap();
    assert!(matches!(client.submit(&graph), Err(ClientError::InvalidGraph(_))));
    drop(client);
    cluster.shutdown().unwrap();
}

#[test]
fn several_graphs_in_sequence_on_one_cluster() {
    let cluster = LocalCluster::start(&spec(SchedulerKind::WorkStealing, 2)).unwrap();
    let mut client = cluster.client().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..3 {
        let graph = random_sum_graph(&mut rng, 100);
        assert_eq!(client.run(&graph).unwrap().outputs, oracle_outputs(&graph));
    }
    drop(client);
    cluster.shutdown().unwrap();
}

#[test]
fn running_tasks_never_exceed_the_cores() {
    let mut cluster = spec(SchedulerKind::WorkStealing, 2);
    cluster.cores_per_worker = 3;
    let graph = gen_merge(40, 20, 8);
    let dir = tempfile::tempdir().unwrap();
    let run = run_repetition(&bench(graph, "slots", cluster, dir.path()), 0).unwrap();
    assert_eq!(run.record.status, RunStatus::Ok);
    assert_eq!(run.worker_reports.len(), 2);
    for r in &run.worker_reports {
        assert!(r.max_running <= 3, "{r:?}");
    }
    assert!(run.worker_reports.iter().any(|r| r.max_running >= 2));
    let done: u64 = run.worker_reports.iter().map(|r| r.completed).sum();
    assert_eq!(done, 41);
}

#[test]
fn zero_workers_answer_with_constant_objects() {
    let mut cluster = spec(SchedulerKind::WorkStealing, 3);
    cluster.mode = WorkerMode::Zero;
    let graph = gen_tree(8);
    let dir = tempfile::tempdir().unwrap();
    let run = run_repetition(&bench(graph, "zero", cluster, dir.path()), 0).unwrap();
    assert_eq!(run.record.status, RunStatus::Ok);
    assert!(run.outputs.values().all(|v| v[..] == ZERO_OBJECT));
    let report = audit_trace_file(run.trace.as_ref().unwrap());
    assert!(report.is_clean(), "{:?}", report.violations);
    assert_eq!(report.final_states.get("finished"), Some(&255));
}

#[test]
fn makespan_respects_the_critical_path() {
    let graph = TaskGraph::new(
        vec![
            TaskSpec::new(0, vec![], PayloadSpec::sleep(30, 8)),
            TaskSpec::new(1, vec![0], PayloadSpec::sleep(20, 8)),
            TaskSpec::new(2, vec![], PayloadSpec::sleep(10, 8)),
            TaskSpec::new(3, vec![1, 2], PayloadSpec::sleep(25, 8)),
        ],
        vec![3],
    );
    let bound = longest_duration_path(&graph);
    assert_eq!(bound, 75);
    let dir = tempfile::tempdir().unwrap();
    let mut config = bench(graph, "chain", spec(SchedulerKind::WorkStealing, 2), dir.path());
    config.reps = 2;
    for run in run_benchmark_runs(&config).unwrap() {
        assert_eq!(run.record.status, RunStatus::Ok);
        assert!(run.record.makespan * 1000.0 >= bound as f64, "{}", run.record.makespan);
        assert_eq!(run.record.aot, run.record.makespan * 1000.0 / 4.0);
    }
}

#[test]
fn repetitions_get_fresh_clusters_and_distinct_indices() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = bench(gen_merge(20, 0, 8), "merge", spec(SchedulerKind::Random, 2), dir.path());
    config.reps = 3;
    let runs = run_benchmark_runs(&config).unwrap();
    let reps: Vec<usize> = runs.iter().map(|r| r.record.repetition).collect();
    assert_eq!(reps, vec![0, 1, 2]);
    for r in &runs {
        // Fresh server each time: internal ids restart, so every trace has
        // exactly this graph's tasks.
        assert_eq!(audit_trace_file(r.trace.as_ref().unwrap()).tasks, 21);
    }
}

#[test]
fn timeouts_become_censored_rows() {
    let graph = gen_merge(1, 2_000, 8);
    let dir = tempfile::tempdir().unwrap();
    let mut config = bench(graph, "slow", spec(SchedulerKind::WorkStealing, 1), dir.path());
    config.timeout = Duration::from_millis(200);
    let run = run_repetition(&config, 0).unwrap();
    assert_eq!(run.record.status, RunStatus::Timeout);
    assert_eq!(run.record.makespan, 0.2);
}

#[test]
fn slow_worker_loses_queued_tasks() {
    let mut cluster = spec(SchedulerKind::WorkStealing, 3);
    cluster.worker_scales = vec![10.0];
    let dir = tempfile::tempdir().unwrap();
    let run = run_repetition(&bench(gen_merge(60, 10, 8), "skew", cluster, dir.path()), 0).unwrap();
    assert_eq!(run.record.status, RunStatus::Ok);
    let slow = run.worker_reports[0].worker_id;
    let report = audit_trace_file(run.trace.as_ref().unwrap());
    assert!(report.is_clean(), "{:?}", report.violations);
    assert!(report.moved_away.get(&slow).copied().unwrap_or(0) >= 1, "{report:?}");
}
