//! Client SDK: submit a task graph, wait for its outputs and measure the
//! makespan as seen by the submitter.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError};
use dtask_core::protocol::{read_message, write_message, ProtocolError, StateSummary, ToClient, ToServer};
use dtask_core::{validate_graph, GraphError, TaskGraph, TaskId};
use thiserror::Error;

use crate::net;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol error: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("invalid graph: {0}")]
    InvalidGraph(#[from] GraphError),
    #[error("server rejected the graph: {0}")]
    Rejected(String),
    #[error("task {task} failed: {error}")]
    TaskFailed { task: TaskId, error: String },
    #[error("output of task {0} is not available")]
    OutputMissing(TaskId),
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("connection to the server was lost")]
    Disconnected,
    #[error("unexpected reply from the server: {0}")]
    Unexpected(String),
}

pub type Result<T> = std::result::Result<T, ClientError>;

/// A message from the server with its arrival time.
struct Incoming {
    at: Instant,
    msg: ToClient,
}

/// A graph accepted by the server whose outputs are still outstanding.
#[derive(Debug, Clone)]
pub struct Submission {
    pub graph_id: u64,
    /// Taken right before the graph was encoded and sent.
    pub submitted_at: Instant,
    /// Arrival of the server's acknowledgement.
    pub acked_at: Instant,
    pub outputs: Vec<TaskId>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub graph_id: u64,
    pub outputs: BTreeMap<TaskId, Vec<u8>>,
    /// Submission until arrival of the last output.
    pub makespan: Duration,
}

pub struct Client {
    stream: TcpStream,
    writer: BufWriter<TcpStream>,
    incoming: Receiver<std::result::Result<Incoming, ProtocolError>>,
    /// Messages received while waiting for something else.
    backlog: VecDeque<Incoming>,
    reader: Option<JoinHandle<()>>,
    client_id: u64,
    timeout: Duration,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Client> {
        let stream = net::connect(addr)?;
        let writer = BufWriter::new(stream.try_clone()?);
        let read_half = stream.try_clone()?;
        let (tx, rx) = unbounded();
        let reader = std::thread::Builder::new().name("client-reader".into()).spawn(move || {
            let mut reader = BufReader::with_capacity(1 << 16, read_half);
            loop {
                let item = read_message(&mut reader).and_then(ToClient::from_message);
                let at = Instant::now();
                let stop = item.is_err();
                if tx.send(item.map(|msg| Incoming { at, msg })).is_err() || stop {
                    return;
                }
            }
        })?;
        let mut client = Client {
            stream,
            writer,
            incoming: rx,
            backlog: VecDeque::new(),
            reader: Some(reader),
            client_id: 0,
            timeout: DEFAULT_TIMEOUT,
        };
        client.send(ToServer::RegisterClient)?;
        let deadline = Instant::now() + client.timeout;
        let reply = client.wait_for(deadline, |m| matches!(m, ToClient::Registered { .. }))?;
        if let ToClient::Registered { client_id } = reply.msg {
            client.client_id = client_id;
        }
        Ok(client)
    }

    pub fn client_id(&self) -> u64 {
        self.client_id
    }

    /// Bounds every blocking call of this client.
    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    fn send(&mut self, msg: ToServer) -> Result<()> {
        write_message(&mut self.writer, &msg.into_message())?;
        self.writer.flush()?;
        Ok(())
    }

    /// Next message, from the backlog first.
    fn next(&mut self, deadline: Instant) -> Result<Incoming> {
        if let Some(m) = self.backlog.pop_front() {
            return Ok(m);
        }
        let wait = deadline.saturating_duration_since(Instant::now());
        match self.incoming.recv_timeout(wait) {
            Ok(Ok(m)) => Ok(m),
            Ok(Err(ProtocolError::ConnectionLost)) | Err(RecvTimeoutError::Disconnected) => Err(ClientError::Disconnected),
            Ok(Err(e)) => Err(e.into()),
            Err(RecvTimeoutError::Timeout) => Err(ClientError::Timeout(self.timeout)),
        }
    }

    /// Waits for the first message matching `wanted`, keeping the others.
    fn wait_for(&mut self, deadline: Instant, wanted: impl Fn(&ToClient) -> bool) -> Result<Incoming> {
        if let Some(pos) = self.backlog.iter().position(|m| wanted(&m.msg)) {
            return Ok(self.backlog.remove(pos).expect("position is valid"));
        }
        loop {
            let wait = deadline.saturating_duration_since(Instant::now());
            let m = match self.incoming.recv_timeout(wait) {
                Ok(Ok(m)) => m,
                Ok(Err(ProtocolError::ConnectionLost)) | Err(RecvTimeoutError::Disconnected) => {
                    return Err(ClientError::Disconnected)
                }
                Ok(Err(e)) => return Err(e.into()),
                Err(RecvTimeoutError::Timeout) => return Err(ClientError::Timeout(self.timeout)),
            };
            if wanted(&m.msg) {
                return Ok(m);
            }
            self.backlog.push_back(m);
        }
    }

    /// Validates and submits a graph, waiting for the server to accept it.
    pub fn submit(&mut self, graph: &TaskGraph) -> Result<Submission> {
        validate_graph(graph)?;
        let outputs = graph.outputs.clone();
        let msg = ToServer::SubmitGraph { graph: graph.clone() };
        let submitted_at = Instant::now();
        self.send(msg)?;
        let deadline = submitted_at + self.timeout;
        let ack = self.wait_for(deadline, |m| matches!(m, ToClient::SubmitAck { .. }))?;
        match ack.msg {
            ToClient::SubmitAck { result: Ok(graph_id) } => {
                Ok(Submission { graph_id, submitted_at, acked_at: ack.at, outputs })
            }
            ToClient::SubmitAck { result: Err(e) } => Err(ClientError::Rejected(e)),
            other => Err(ClientError::Unexpected(format!("{other:?}"))),
        }
    }

    /// Waits until every output of `submission` has arrived.
    pub fn gather(&mut self, submission: &Submission) -> Result<RunResult> {
        let mut missing: BTreeSet<TaskId> = submission.outputs.iter().copied().collect();
        let mut outputs = BTreeMap::new();
        let mut last = submission.acked_at;
        let deadline = Instant::now() + self.timeout;
        while !missing.is_empty() {
            let m = self.next(deadline)?;
            match m.msg {
                ToClient::ResultReply { task, data } if missing.contains(&task) => {
                    let data = data.ok_or(ClientError::OutputMissing(task))?;
                    missing.remove(&task);
                    outputs.insert(task, data);
                    last = m.at;
                }
                ToClient::TaskErred { task, error } => return Err(ClientError::TaskFailed { task, error }),
                other => log::debug!("ignoring {other:?} while gathering"),
            }
        }
        Ok(RunResult { graph_id: submission.graph_id, outputs, makespan: last.duration_since(submission.submitted_at) })
    }

    /// Submits a graph and gathers its outputs.
    pub fn run(&mut self, graph: &TaskGraph) -> Result<RunResult> {
        let submission = self.submit(graph)?;
        self.gather(&submission)
    }

    /// Asks for the output of a task of the latest submission again.
    pub fn fetch(&mut self, task: TaskId) -> Result<Option<Vec<u8>>> {
        self.send(ToServer::FetchResult { task })?;
        let deadline = Instant::now() + self.timeout;
        let reply = self.wait_for(deadline, |m| matches!(m, ToClient::ResultReply { task: t, .. } if *t == task))?;
        match reply.msg {
            ToClient::ResultReply { data, .. } => Ok(data),
            other => Err(ClientError::Unexpected(format!("{other:?}"))),
        }
    }

    /// Number of registered workers and task counts per state.
    pub fn status(&mut self) -> Result<(u64, StateSummary)> {
        self.send(ToServer::Heartbeat)?;
        let deadline = Instant::now() + self.timeout;
        match self.wait_for(deadline, |m| matches!(m, ToClient::Heartbeat { .. }))?.msg {
            ToClient::Heartbeat { workers, states } => Ok((workers, states)),
            other => Err(ClientError::Unexpected(format!("{other:?}"))),
        }
    }

    /// Polls until at least `count` workers are registered.
    pub fn wait_for_workers(&mut self, count: u64, timeout: Duration) -> Result<()> {
        let deadline = Instant::now() + timeout;
        loop {
            if self.status()?.0 >= count {
                return Ok(());
            }
            if Instant::now() >= deadline {
                return Err(ClientError::Timeout(timeout));
            }
            std::thread::sleep(Duration::from_millis(10));
        }
    }

    /// Stops the server and all of its workers.
    pub fn shutdown(mut self) -> Result<()> {
        self.send(ToServer::Shutdown)
    }
}

impl Drop for Client {
    fn drop(&mut self) {
        let _ = self.writer.flush();
        let _ = self.stream.shutdown(Shutdown::Both);
        if let Some(r) = self.reader.take() {
            let _ = r.join();
        }
    }
}
