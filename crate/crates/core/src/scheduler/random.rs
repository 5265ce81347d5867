use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Assignment, Scheduler, SchedulerEvent, SchedulerUpdate};
use crate::model::{TaskId, WorkerId};

/// Uniform choice among `workers`; `None` when there are none.
pub fn random_choose(workers: &[WorkerId], rng: &mut impl Rng) -> Option<WorkerId> {
    if workers.is_empty() {
        None
    } else {
        Some(workers[rng.random_range(0..workers.len())])
    }
}

/// Places every task on a uniformly random worker as soon as its graph
/// arrives, before it is ready. Keeps no graph state and never retracts; the
/// server holds each placement until the task becomes ready.
pub struct RandomScheduler {
    rng: ChaCha8Rng,
    workers: Vec<WorkerId>,
    held: Vec<(TaskId, i64)>,
}

impl RandomScheduler {
    pub fn new(seed: u64) -> Self {
        RandomScheduler { rng: ChaCha8Rng::seed_from_u64(seed), workers: Vec::new(), held: Vec::new() }
    }

    fn place(&mut self, task: TaskId, priority: i64, out: &mut Vec<Assignment>) {
        match random_choose(&self.workers, &mut self.rng) {
            Some(worker) => out.push(Assignment { task, worker, priority }),
            None => self.held.push((task, priority)),
        }
    }
}

impl Scheduler for RandomScheduler {
    fn name(&self) -> &'static str {
        "random"
    }

    fn step(&mut self, events: Vec<SchedulerEvent>) -> SchedulerUpdate {
        let mut assignments = Vec::new();
        for event in events {
            match event {
                SchedulerEvent::GraphSubmitted { graph } => {
                    for task in graph.tasks {
                        self.place(task.id, task.priority_hint, &mut assignments);
                    }
                }
                SchedulerEvent::WorkerJoined { worker } => {
                    if let Err(pos) = self.workers.binary_search(&worker.id) {
                        self.workers.insert(pos, worker.id);
                    }
                    for (task, priority) in std::mem::take(&mut self.held) {
                        self.place(task, priority, &mut assignments);
                    }
                }
                SchedulerEvent::WorkerLeft { worker } => {
                    self.workers.retain(|&w| w != worker);
                }
                SchedulerEvent::TaskFinished { .. }
                | SchedulerEvent::TaskFailed { .. }
                | SchedulerEvent::StealFailed { .. } => {}
            }
        }
        SchedulerUpdate { assignments, retractions: Vec::new() }
    }

    fn check_invariants(&self) -> Result<(), String> {
        if !self.workers.is_empty() && !self.held.is_empty() {
            return Err(format!("{} tasks held while workers are available", self.held.len()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{PayloadSpec, TaskGraph, TaskSpec};
    use crate::scheduler::WorkerDescriptor;

    fn joined(id: WorkerId) -> SchedulerEvent {
        SchedulerEvent::WorkerJoined { worker: WorkerDescriptor { id, node: "n".into(), cores: 1 } }
    }

    fn independent(n: u64) -> TaskGraph {
        TaskGraph::new((0..n).map(|i| TaskSpec::new(i, vec![], PayloadSpec::constant(8))).collect(), vec![])
    }

    #[test]
    fn single_worker_always_chosen() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(random_choose(&[7], &mut rng), Some(7));
        }
        assert_eq!(random_choose(&[], &mut rng), None);
    }

    #[test]
    fn tasks_held_until_a_worker_joins() {
        let mut s = RandomScheduler::new(3);
        let update = s.step(vec![SchedulerEvent::GraphSubmitted { graph: independent(5) }]);
        assert!(update.assignments.is_empty());
        assert!(s.check_invariants().is_ok());
        let update = s.step(vec![joined(1)]);
        assert_eq!(update.assignments.len(), 5);
        assert!(update.assignments.iter().all(|a| a.worker == 1));
        assert!(s.check_invariants().is_ok());
    }

    #[test]
    fn dependent_tasks_are_placed_on_arrival() {
        let graph = TaskGraph::new(
            vec![
                TaskSpec::new(0, vec![], PayloadSpec::constant(8)),
                TaskSpec::new(1, vec![0], PayloadSpec::sum(0)),
            ],
            vec![1],
        );
        let mut s = RandomScheduler::new(3);
        let update = s.step(vec![joined(1), joined(2), SchedulerEvent::GraphSubmitted { graph }]);
        assert_eq!(update.assignments.iter().map(|a| a.task).collect::<Vec<_>>(), vec![0, 1]);
        assert!(update.retractions.is_empty());
    }
}
