//! Typed views of the messages exchanged on each link.
//!
//! The same op name may appear in both directions of a link with different
//! keys (for example a `REGISTER_WORKER` request and its reply), so decoding
//! is done per receiving side. Unknown header keys are ignored.

use super::codec::{Message, OpKind, ProtocolError};
use super::value::Value;
use crate::model::{PayloadKind, PayloadSpec, TaskGraph, TaskId, TaskSpec, WorkerId};

fn field<'a>(msg: &'a Message, key: &str) -> Result<&'a Value, ProtocolError> {
    msg.get(key).ok_or_else(|| ProtocolError::UnexpectedMessage {
        op: op_name(msg),
        reason: format!("missing key `{key}`"),
    })
}

fn op_name(msg: &Message) -> String {
    msg.get("op").and_then(Value::as_str).unwrap_or("?").to_owned()
}

fn bad(msg: &Message, key: &str, expected: &str) -> ProtocolError {
    ProtocolError::UnexpectedMessage {
        op: op_name(msg),
        reason: format!("key `{key}` is not {expected}"),
    }
}

fn get_u64(msg: &Message, key: &str) -> Result<u64, ProtocolError> {
    field(msg, key)?.as_u64().ok_or_else(|| bad(msg, key, "an unsigned integer"))
}

fn get_i64(msg: &Message, key: &str) -> Result<i64, ProtocolError> {
    field(msg, key)?.as_i64().ok_or_else(|| bad(msg, key, "an integer"))
}

fn get_bool(msg: &Message, key: &str) -> Result<bool, ProtocolError> {
    field(msg, key)?.as_bool().ok_or_else(|| bad(msg, key, "a boolean"))
}

fn get_str(msg: &Message, key: &str) -> Result<String, ProtocolError> {
    Ok(field(msg, key)?.as_str().ok_or_else(|| bad(msg, key, "a string"))?.to_owned())
}

fn get_ids(msg: &Message, key: &str) -> Result<Vec<TaskId>, ProtocolError> {
    ids_from(field(msg, key)?).ok_or_else(|| bad(msg, key, "a list of task ids"))
}

fn ids_from(value: &Value) -> Option<Vec<TaskId>> {
    value.as_array()?.iter().map(Value::as_u64).collect()
}

fn ids_value(ids: &[TaskId]) -> Value {
    Value::Array(ids.iter().map(|&id| Value::UInt(id)).collect())
}

/// Optional blob stored under "data"; `found` tells whether it is present.
fn data_reply(msg: &mut Message) -> Result<Option<Vec<u8>>, ProtocolError> {
    if get_bool(msg, "found")? {
        msg.take_blob("data").map(Some).ok_or_else(|| bad(msg, "data", "a blob placeholder"))
    } else {
        Ok(None)
    }
}

fn with_data(msg: Message, data: Option<Vec<u8>>) -> Message {
    match data {
        Some(bytes) => msg.with("found", true).with_blob("data", bytes),
        None => msg.with("found", false),
    }
}

fn encode_task(task: &TaskSpec) -> Value {
    Value::Array(vec![
        Value::UInt(task.id),
        ids_value(&task.inputs),
        Value::from(task.payload.kind.as_str()),
        Value::UInt(task.payload.duration_ms),
        Value::UInt(task.payload.output_size),
        Value::from(task.priority_hint),
    ])
}

fn decode_task(value: &Value) -> Option<TaskSpec> {
    let items = value.as_array()?;
    if items.len() < 5 {
        return None;
    }
    Some(TaskSpec {
        id: items[0].as_u64()?,
        inputs: ids_from(&items[1])?,
        payload: PayloadSpec {
            kind: items[2].as_str()?.parse::<PayloadKind>().ok()?,
            duration_ms: items[3].as_u64()?,
            output_size: items[4].as_u64()?,
        },
        priority_hint: items.get(5).map(|v| v.as_i64()).unwrap_or(Some(0))?,
    })
}

fn encode_graph(graph: &TaskGraph) -> (Value, Value) {
    (Value::Array(graph.tasks.iter().map(encode_task).collect()), ids_value(&graph.outputs))
}

fn decode_graph(msg: &Message) -> Result<TaskGraph, ProtocolError> {
    let tasks = field(msg, "tasks")?
        .as_array()
        .ok_or_else(|| bad(msg, "tasks", "a list"))?
        .iter()
        .map(decode_task)
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| bad(msg, "tasks", "a list of task records"))?;
    Ok(TaskGraph { tasks, outputs: get_ids(msg, "outputs")? })
}

/// Per-state task counts reported by the server in heartbeat replies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StateSummary {
    pub waiting: u64,
    pub ready: u64,
    pub assigned: u64,
    pub running: u64,
    pub finished: u64,
    pub error: u64,
}

/// Location of one task input: the producing task and worker addresses
/// holding its output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputLocation {
    pub task: TaskId,
    pub addresses: Vec<String>,
}

/// Messages received by the server, from workers and clients.
#[derive(Debug, Clone, PartialEq)]
pub enum ToServer {
    RegisterWorker { cores: u32, node: String, address: String, zero: bool },
    RegisterClient,
    SubmitGraph { graph: TaskGraph },
    TaskFinished { task: TaskId, size: u64 },
    TaskErred { task: TaskId, error: String },
    StealResponse { task: TaskId, success: bool },
    DataPlaced { task: TaskId },
    /// Answer to a server-originated `FETCH_DATA`.
    DataReply { task: TaskId, data: Option<Vec<u8>> },
    FetchResult { task: TaskId },
    Heartbeat,
    Shutdown,
}

impl ToServer {
    pub fn into_message(self) -> Message {
        match self {
            ToServer::RegisterWorker { cores, node, address, zero } => {
                Message::new(OpKind::RegisterWorker)
                    .with("cores", cores)
                    .with("node", node)
                    .with("address", address)
                    .with("zero", zero)
            }
            ToServer::RegisterClient => Message::new(OpKind::RegisterClient),
            ToServer::SubmitGraph { graph } => {
                let (tasks, outputs) = encode_graph(&graph);
                Message::new(OpKind::SubmitGraph).with("tasks", tasks).with("outputs", outputs)
            }
            ToServer::TaskFinished { task, size } => {
                Message::new(OpKind::TaskFinished).with("task", task).with("size", size)
            }
            ToServer::TaskErred { task, error } => {
                Message::new(OpKind::TaskErred).with("task", task).with("error", error)
            }
            ToServer::StealResponse { task, success } => {
                Message::new(OpKind::StealResponse).with("task", task).with("success", success)
            }
            ToServer::DataPlaced { task } => Message::new(OpKind::DataPlaced).with("task", task),
            ToServer::DataReply { task, data } => {
                with_data(Message::new(OpKind::DataReply).with("task", task), data)
            }
            ToServer::FetchResult { task } => Message::new(OpKind::FetchResult).with("task", task),
            ToServer::Heartbeat => Message::new(OpKind::Heartbeat),
            ToServer::Shutdown => Message::new(OpKind::Shutdown),
        }
    }

    pub fn from_message(mut msg: Message) -> Result<Self, ProtocolError> {
        Ok(match msg.op()? {
            OpKind::RegisterWorker => ToServer::RegisterWorker {
                cores: u32::try_from(get_u64(&msg, "cores")?)
                    .map_err(|_| bad(&msg, "cores", "a 32-bit count"))?,
                node: get_str(&msg, "node")?,
                address: get_str(&msg, "address")?,
                zero: get_bool(&msg, "zero")?,
            },
            OpKind::RegisterClient => ToServer::RegisterClient,
            OpKind::SubmitGraph => ToServer::SubmitGraph { graph: decode_graph(&msg)? },
            OpKind::TaskFinished => ToServer::TaskFinished {
                task: get_u64(&msg, "task")?,
                size: get_u64(&msg, "size")?,
            },
            OpKind::TaskErred => ToServer::TaskErred {
                task: get_u64(&msg, "task")?,
                error: get_str(&msg, "error")?,
            },
            OpKind::StealResponse => ToServer::StealResponse {
                task: get_u64(&msg, "task")?,
                success: get_bool(&msg, "success")?,
            },
            OpKind::DataPlaced => ToServer::DataPlaced { task: get_u64(&msg, "task")? },
            OpKind::DataReply => {
                let task = get_u64(&msg, "task")?;
                ToServer::DataReply { task, data: data_reply(&mut msg)? }
            }
            OpKind::FetchResult => ToServer::FetchResult { task: get_u64(&msg, "task")? },
            OpKind::Heartbeat => ToServer::Heartbeat,
            OpKind::Shutdown => ToServer::Shutdown,
            op => {
                return Err(ProtocolError::UnexpectedMessage {
                    op: op.to_string(),
                    reason: "not accepted by the server".into(),
                })
            }
        })
    }
}

/// Messages the server sends to workers.
#[derive(Debug, Clone, PartialEq)]
pub enum ToWorker {
    Registered { worker_id: WorkerId },
    AssignTask { task: TaskId, payload: PayloadSpec, priority: i64, inputs: Vec<InputLocation> },
    StealRequest { task: TaskId },
    FetchData { task: TaskId },
    ReleaseData { tasks: Vec<TaskId> },
    Shutdown,
}

impl ToWorker {
    pub fn into_message(self) -> Message {
        match self {
            ToWorker::Registered { worker_id } => {
                Message::new(OpKind::RegisterWorker).with("worker_id", worker_id)
            }
            ToWorker::AssignTask { task, payload, priority, inputs } => {
                let inputs = inputs
                    .into_iter()
                    .map(|loc| {
                        Value::Array(vec![
                            Value::UInt(loc.task),
                            Value::Array(loc.addresses.into_iter().map(Value::Str).collect()),
                        ])
                    })
                    .collect::<Vec<_>>();
                Message::new(OpKind::AssignTask)
                    .with("task", task)
                    .with("kind", payload.kind.as_str())
                    .with("duration_ms", payload.duration_ms)
                    .with("output_size", payload.output_size)
                    .with("priority", priority)
                    .with("inputs", Value::Array(inputs))
            }
            ToWorker::StealRequest { task } => Message::new(OpKind::StealRequest).with("task", task),
            ToWorker::FetchData { task } => Message::new(OpKind::FetchData).with("task", task),
            ToWorker::ReleaseData { tasks } => {
                Message::new(OpKind::ReleaseData).with("tasks", ids_value(&tasks))
            }
            ToWorker::Shutdown => Message::new(OpKind::Shutdown),
        }
    }

    pub fn from_message(msg: Message) -> Result<Self, ProtocolError> {
        Ok(match msg.op()? {
            OpKind::RegisterWorker => ToWorker::Registered { worker_id: get_u64(&msg, "worker_id")? },
            OpKind::AssignTask => {
                let inputs = field(&msg, "inputs")?
                    .as_array()
                    .ok_or_else(|| bad(&msg, "inputs", "a list"))?
                    .iter()
                    .map(|item| {
                        let pair = item.as_array()?;
                        let task = pair.first()?.as_u64()?;
                        let addresses = pair
                            .get(1)?
                            .as_array()?
                            .iter()
                            .map(|a| a.as_str().map(str::to_owned))
                            .collect::<Option<Vec<_>>>()?;
                        Some(InputLocation { task, addresses })
                    })
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| bad(&msg, "inputs", "a list of [task, [address]] pairs"))?;
                let kind = get_str(&msg, "kind")?
                    .parse::<PayloadKind>()
                    .map_err(|_| bad(&msg, "kind", "a payload kind"))?;
                ToWorker::AssignTask {
                    task: get_u64(&msg, "task")?,
                    payload: PayloadSpec {
                        kind,
                        duration_ms: get_u64(&msg, "duration_ms")?,
                        output_size: get_u64(&msg, "output_size")?,
                    },
                    priority: get_i64(&msg, "priority")?,
                    inputs,
                }
            }
            OpKind::StealRequest => ToWorker::StealRequest { task: get_u64(&msg, "task")? },
            OpKind::FetchData => ToWorker::FetchData { task: get_u64(&msg, "task")? },
            OpKind::ReleaseData => ToWorker::ReleaseData { tasks: get_ids(&msg, "tasks")? },
            OpKind::Shutdown => ToWorker::Shutdown,
            op => {
                return Err(ProtocolError::UnexpectedMessage {
                    op: op.to_string(),
                    reason: "not accepted by a worker from the server".into(),
                })
            }
        })
    }
}

/// Messages the server sends to clients.
#[derive(Debug, Clone, PartialEq)]
pub enum ToClient {
    Registered { client_id: u64 },
    SubmitAck { result: Result<u64, String> },
    ResultReply { task: TaskId, data: Option<Vec<u8>> },
    TaskErred { task: TaskId, error: String },
    Heartbeat { workers: u64, states: StateSummary },
}

impl ToClient {
    pub fn into_message(self) -> Message {
        match self {
            ToClient::Registered { client_id } => {
                Message::new(OpKind::RegisterClient).with("client_id", client_id)
            }
            ToClient::SubmitAck { result: Ok(graph_id) } => {
                Message::new(OpKind::SubmitGraph).with("ok", true).with("graph_id", graph_id)
            }
            ToClient::SubmitAck { result: Err(error) } => {
                Message::new(OpKind::SubmitGraph).with("ok", false).with("error", error)
            }
            ToClient::ResultReply { task, data } => {
                with_data(Message::new(OpKind::ResultReply).with("task", task), data)
            }
            ToClient::TaskErred { task, error } => {
                Message::new(OpKind::TaskErred).with("task", task).with("error", error)
            }
            ToClient::Heartbeat { workers, states } => Message::new(OpKind::Heartbeat)
                .with("workers", workers)
                .with("waiting", states.waiting)
                .with("ready", states.ready)
                .with("assigned", states.assigned)
                .with("running", states.running)
                .with("finished", states.finished)
                .with("error", states.error),
        }
    }

    pub fn from_message(mut msg: Message) -> Result<Self, ProtocolError> {
        Ok(match msg.op()? {
            OpKind::RegisterClient => ToClient::Registered { client_id: get_u64(&msg, "client_id")? },
            OpKind::SubmitGraph => {
                let result = if get_bool(&msg, "ok")? {
                    Ok(get_u64(&msg, "graph_id")?)
                } else {
                    Err(get_str(&msg, "error")?)
                };
                ToClient::SubmitAck { result }
            }
            OpKind::ResultReply => {
                let task = get_u64(&msg, "task")?;
                ToClient::ResultReply { task, data: data_reply(&mut msg)? }
            }
            OpKind::TaskErred => ToClient::TaskErred {
                task: get_u64(&msg, "task")?,
                error: get_str(&msg, "error")?,
            },
            OpKind::Heartbeat => {
                let count = |key: &str| msg.get(key).and_then(Value::as_u64).unwrap_or(0);
                ToClient::Heartbeat {
                    workers: get_u64(&msg, "workers")?,
                    states: StateSummary {
                        waiting: count("waiting"),
                        ready: count("ready"),
                        assigned: count("assigned"),
                        running: count("running"),
                        finished: count("finished"),
                        error: count("error"),
                    },
                }
            }
            op => {
                return Err(ProtocolError::UnexpectedMessage {
                    op: op.to_string(),
                    reason: "not accepted by a client".into(),
                })
            }
        })
    }
}

/// Worker to worker data exchange.
#[derive(Debug, Clone, PartialEq)]
pub enum PeerMessage {
    FetchData { task: TaskId },
    DataReply { task: TaskId, data: Option<Vec<u8>> },
}

impl PeerMessage {
    pub fn into_message(self) -> Message {
        match self {
            PeerMessage::FetchData { task } => Message::new(OpKind::FetchData).with("task", task),
            PeerMessage::DataReply { task, data } => {
                with_data(Message::new(OpKind::DataReply).with("task", task), data)
            }
        }
    }

    pub fn from_message(mut msg: Message) -> Result<Self, ProtocolError> {
        Ok(match msg.op()? {
            OpKind::FetchData => PeerMessage::FetchData { task: get_u64(&msg, "task")? },
            OpKind::DataReply => {
                let task = get_u64(&msg, "task")?;
                PeerMessage::DataReply { task, data: data_reply(&mut msg)? }
            }
            op => {
                return Err(ProtocolError::UnexpectedMessage {
                    op: op.to_string(),
                    reason: "not part of the peer protocol".into(),
                })
            }
        })
    }
}
