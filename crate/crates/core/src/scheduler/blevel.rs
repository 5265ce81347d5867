use std::collections::HashMap;

use crate::model::{topological_order, TaskGraph, TaskId};

/// Length in arcs of the longest path from each task to any sink.
pub fn b_levels(graph: &TaskGraph) -> HashMap<TaskId, u32> {
    let order = topological_order(graph);
    let mut levels: HashMap<TaskId, u32> = HashMap::with_capacity(graph.tasks.len());
    for &i in order.iter().rev() {
        let task = &graph.tasks[i];
        let level = *levels.entry(task.id).or_insert(0);
        for input in &task.inputs {
            let entry = levels.entry(*input).or_insert(0);
            *entry = (*entry).max(level + 1);
        }
    }
    levels
}
