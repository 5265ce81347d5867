//! Worker process logic.
//!
//! A normal worker runs assigned payloads on `cores` execution slots and
//! exchanges task outputs with its peers. A zero worker executes nothing: it
//! reports every assigned task finished immediately, pretends every input was
//! downloaded and answers every data request with a small constant object,
//! which isolates the server's own overhead.

mod normal;
mod zero;

use std::io::{BufReader, BufWriter};
use std::net::{IpAddr, Ipv4Addr, SocketAddr, TcpListener, TcpStream};
use std::sync::Arc;
use std::thread::JoinHandle;

use anyhow::{bail, Context};
use dtask_core::metrics::WorkerMode;
use dtask_core::payload::ExecOptions;
use dtask_core::protocol::{read_message, write_message, PeerMessage, ProtocolError, ToServer, ToWorker};
use dtask_core::{TaskId, WorkerId};

use crate::net::{self, Acceptor};

/// Object every zero worker hands out when asked for data.
pub const ZERO_OBJECT: [u8; 8] = [0; 8];

#[derive(Debug, Clone)]
pub struct WorkerConfig {
    /// Server address, `host:port`.
    pub server: String,
    pub cores: u32,
    /// Host identity; workers with the same node id count as co-located.
    pub node_id: String,
    /// Address for the peer data listener.
    pub listen: String,
    /// Host name announced to peers together with the listener's port;
    /// derived from the listener when absent.
    pub advertise_host: Option<String>,
    pub mode: WorkerMode,
    pub exec: ExecOptions,
    /// Threads downloading inputs from peers.
    pub fetch_threads: usize,
}

impl Default for WorkerConfig {
    fn default() -> Self {
        WorkerConfig {
            server: "127.0.0.1:7070".into(),
            cores: 1,
            node_id: "localhost".into(),
            listen: "127.0.0.1:0".into(),
            advertise_host: None,
            mode: WorkerMode::Normal,
            exec: ExecOptions::default(),
            fetch_threads: 4,
        }
    }
}

/// What a worker did during its lifetime.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WorkerReport {
    pub worker_id: WorkerId,
    /// Tasks completed (executed, or acknowledged in zero mode).
    pub completed: u64,
    /// Highest number of payloads observed running at once.
    pub max_running: usize,
    /// Inputs downloaded from peers.
    pub fetched: u64,
    pub steals_granted: u64,
    pub steals_refused: u64,
}

/// Established link to the server after registration.
struct ServerLink {
    worker_id: WorkerId,
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

fn advertised_address(config: &WorkerConfig, bound: SocketAddr) -> String {
    if let Some(host) = &config.advertise_host {
        return format!("{host}:{}", bound.port());
    }
    if bound.ip().is_unspecified() {
        SocketAddr::new(IpAddr::V4(Ipv4Addr::LOCALHOST), bound.port()).to_string()
    } else {
        bound.to_string()
    }
}

fn register(config: &WorkerConfig, address: String) -> anyhow::Result<ServerLink> {
    let stream = net::connect(&config.server).with_context(|| format!("cannot reach server {}", config.server))?;
    let mut writer = BufWriter::new(stream.try_clone()?);
    let mut reader = BufReader::with_capacity(1 << 16, stream);
    let hello = ToServer::RegisterWorker {
        cores: config.cores,
        node: config.node_id.clone(),
        address,
        zero: config.mode == WorkerMode::Zero,
    };
    write_message(&mut writer, &hello.into_message())?;
    std::io::Write::flush(&mut writer)?;
    match ToWorker::from_message(read_message(&mut reader)?)? {
        ToWorker::Registered { worker_id } => Ok(ServerLink { worker_id, reader, writer }),
        other => bail!("unexpected registration reply: {other:?}"),
    }
}

/// Serves peer data requests from `lookup` on one thread per connection.
fn serve_peers(
    listener: TcpListener,
    lookup: Arc<dyn Fn(TaskId) -> Option<Vec<u8>> + Send + Sync>,
) -> std::io::Result<Acceptor> {
    Acceptor::spawn(listener, "peer-listener", move |stream| {
        let lookup = lookup.clone();
        let spawned = std::thread::Builder::new().name("peer-conn".into()).spawn(move || {
            let Ok(read_half) = stream.try_clone() else { return };
            let mut reader = BufReader::new(read_half);
            let mut writer = BufWriter::new(stream);
            loop {
                let request = match read_message(&mut reader).and_then(PeerMessage::from_message) {
                    Ok(PeerMessage::FetchData { task }) => task,
                    Ok(other) => {
                        log::warn!("unexpected peer message {other:?}");
                        return;
                    }
                    Err(ProtocolError::ConnectionLost) => return,
                    Err(e) => {
                        log::warn!("peer connection failed: {e}");
                        return;
                    }
                };
                let reply = PeerMessage::DataReply { task: request, data: lookup(request) };
                if write_message(&mut writer, &reply.into_message()).is_err()
                    || std::io::Write::flush(&mut writer).is_err()
                {
                    return;
                }
            }
        });
        if let Err(e) = spawned {
            log::error!("cannot serve peer connection: {e}");
        }
    })
}

/// Connects, registers and serves the server until it shuts the worker down
/// or the connection drops.
pub fn run_worker(config: WorkerConfig) -> anyhow::Result<WorkerReport> {
    if config.cores == 0 {
        bail!("a worker needs at least one core");
    }
    if !(config.exec.duration_scale.is_finite() && config.exec.duration_scale >= 0.0) {
        bail!("duration scale must be a non-negative number");
    }
    let listener = TcpListener::bind(&config.listen).with_context(|| format!("cannot listen on {}", config.listen))?;
    let address = advertised_address(&config, listener.local_addr()?);
    let link = register(&config, address.clone())?;
    log::info!("registered as worker {} ({} cores, {:?} mode, peers via {address})", link.worker_id, config.cores, config.mode);
    match config.mode {
        WorkerMode::Normal => normal::run(&config, link, listener),
        WorkerMode::Zero => zero::run(link, listener),
    }
}

/// Runs a worker on a background thread of the current process.
pub fn spawn_worker(config: WorkerConfig) -> std::io::Result<JoinHandle<anyhow::Result<WorkerReport>>> {
    std::thread::Builder::new().name("worker".into()).spawn(move || run_worker(config))
}
