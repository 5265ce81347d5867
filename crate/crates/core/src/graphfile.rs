//! Line-oriented text format for task graphs.
//!
//! ```text
//! task 0 deps= kind=CONST dur_ms=0 out_bytes=8
//! task 1 deps= kind=CONST dur_ms=0 out_bytes=8
//! task 2 deps=0,1 kind=SUM dur_ms=0 out_bytes=8
//! outputs=2
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. A task line may carry
//! an extra `prio=<int>` field holding its priority hint.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use thiserror::Error;

use crate::model::{PayloadSpec, TaskGraph, TaskId, TaskSpec};

#[derive(Debug, Error)]
pub enum GraphFileError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("missing `outputs=` line")]
    MissingOutputs,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn parse_ids(text: &str) -> Result<Vec<TaskId>, String> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|s| s.trim().parse::<TaskId>().map_err(|e| format!("bad task id `{s}`: {e}")))
        .collect()
}

fn join_ids(ids: &[TaskId]) -> String {
    let mut out = String::new();
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "{id}").unwrap();
    }
    out
}

fn parse_task_line(rest: &str) -> Result<TaskSpec, String> {
    let mut fields = rest.split_whitespace();
    let id: TaskId = fields
        .next()
        .ok_or("missing task id")?
        .parse()
        .map_err(|e| format!("bad task id: {e}"))?;
    let mut deps = None;
    let mut kind = None;
    let mut dur = None;
    let mut out = None;
    let mut prio = 0i64;
    for field in fields {
        let (key, value) = field.split_once('=').ok_or_else(|| format!("bad field `{field}`"))?;
        match key {
            "deps" => deps = Some(parse_ids(value)?),
            "kind" => kind = Some(value.parse()?),
            "dur_ms" => dur = Some(value.parse::<u64>().map_err(|e| format!("bad dur_ms: {e}"))?),
            "out_bytes" => {
                out = Some(value.parse::<u64>().map_err(|e| format!("bad out_bytes: {e}"))?)
            }
            "prio" => prio = value.parse().map_err(|e| format!("bad prio: {e}"))?,
            other => return Err(format!("unknown field `{other}`")),
        }
    }
    let payload = PayloadSpec {
        kind: kind.ok_or("missing kind=")?,
        duration_ms: dur.ok_or("missing dur_ms=")?,
        output_size: out.ok_or("missing out_bytes=")?,
    };
    Ok(TaskSpec { id, inputs: deps.ok_or("missing deps=")?, payload, priority_hint: prio })
}

pub fn parse_graph(text: &str) -> Result<TaskGraph, GraphFileError> {
    let mut tasks = Vec::new();
    let mut outputs = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        let syntax = |message: String| GraphFileError::Syntax { line: lineno + 1, message };
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("task ") {
            if outputs.is_some() {
                return Err(syntax("task line after outputs=".into()));
            }
            tasks.push(parse_task_line(rest).map_err(syntax)?);
        } else if let Some(rest) = line.strip_prefix("outputs=") {
            if outputs.is_some() {
                return Err(syntax("duplicate outputs= line".into()));
            }
            outputs = Some(parse_ids(rest).map_err(syntax)?);
        } else {
            return Err(syntax(format!("unrecognized line `{line}`")));
        }
    }
    Ok(TaskGraph { tasks, outputs: outputs.ok_or(GraphFileError::MissingOutputs)? })
}

pub fn read_graph(reader: impl BufRead) -> Result<TaskGraph, GraphFileError> {
    let text = std::io::read_to_string(reader)?;
    parse_graph(&text)
}

pub fn write_graph(graph: &TaskGraph, mut out: impl Write) -> std::io::Result<()> {
    for task in &graph.tasks {
        write!(
            out,
            "task {} deps={} kind={} dur_ms={} out_bytes={}",
            task.id,
            join_ids(&task.inputs),
            task.payload.kind,
            task.payload.duration_ms,
            task.payload.output_size
        )?;
        if task.priority_hint != 0 {
            write!(out, " prio={}", task.priority_hint)?;
        }
        writeln!(out)?;
    }
    writeln!(out, "outputs={}", join_ids(&graph.outputs))
}

pub fn graph_to_string(graph: &TaskGraph) -> String {
    let mut buf = Vec::new();
    write_graph(graph, &mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}
