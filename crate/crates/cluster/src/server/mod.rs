//! The server: a reactor thread owning all connections and bookkeeping, and
//! a scheduler thread that turns event batches into placement decisions.
//! The two only exchange owned values over channels.

mod reactor;

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::thread::JoinHandle;

use crossbeam_channel::{unbounded, Receiver, Sender};
use dtask_core::protocol::{read_message, write_message, ProtocolError, ToServer};
use dtask_core::scheduler::{create_scheduler, SchedulerConfig, SchedulerEvent, SchedulerLogEntry, SchedulerUpdate};

pub use reactor::{ConnId, Outbox, Reactor};

use crate::net::Acceptor;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Address to bind, e.g. `127.0.0.1:0`.
    pub bind: String,
    pub scheduler: SchedulerConfig,
    /// Task event trace, one line per event.
    pub trace: Option<PathBuf>,
    /// Scheduler step log, one JSON object per step.
    pub sched_log: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig { bind: "127.0.0.1:0".into(), scheduler: SchedulerConfig::default(), trace: None, sched_log: None }
    }
}

enum Input {
    Connected(ConnId, TcpStream),
    Message(ConnId, ToServer),
    Fault(ConnId, ProtocolError),
    Closed(ConnId),
    Update(SchedulerUpdate),
}

/// A running server.
pub struct ServerHandle {
    addr: SocketAddr,
    reactor: JoinHandle<io::Result<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Waits until a client shuts the server down.
    pub fn join(self) -> io::Result<()> {
        self.reactor.join().unwrap_or_else(|_| Err(io::Error::other("reactor thread panicked")))
    }
}

/// Binds the listening socket and starts the server threads.
pub fn start(config: ServerConfig) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(&config.bind)?;
    let trace: Option<Box<dyn Write + Send>> = match &config.trace {
        Some(path) => Some(Box::new(BufWriter::with_capacity(1 << 16, File::create(path)?))),
        None => None,
    };
    let sched_log = match &config.sched_log {
        Some(path) => Some(BufWriter::new(File::create(path)?)),
        None => None,
    };
    let (input_tx, input_rx) = unbounded::<Input>();
    let (event_tx, event_rx) = unbounded::<Vec<SchedulerEvent>>();

    let scheduler_config = config.scheduler.clone();
    let updates = input_tx.clone();
    let scheduler = std::thread::Builder::new()
        .name("scheduler".into())
        .spawn(move || run_scheduler(scheduler_config, event_rx, updates, sched_log))?;

    let accept_tx = input_tx.clone();
    let mut next_conn: ConnId = 1;
    let acceptor = Acceptor::spawn(listener, "acceptor", move |stream| {
        let conn = next_conn;
        next_conn += 1;
        spawn_reader(conn, stream, accept_tx.clone());
    })?;
    let addr = acceptor.local_addr();
    drop(input_tx);

    let reactor = std::thread::Builder::new().name("reactor".into()).spawn(move || {
        let result = run_reactor(Reactor::new(trace), input_rx, event_tx);
        drop(acceptor);
        let _ = scheduler.join();
        result
    })?;
    log::info!("server listening on {addr} with the {} scheduler", config.scheduler.kind);
    Ok(ServerHandle { addr, reactor })
}

fn spawn_reader(conn: ConnId, stream: TcpStream, tx: Sender<Input>) {
    let reader = match stream.try_clone() {
        Ok(r) => r,
        Err(e) => {
            log::warn!("cannot clone connection: {e}");
            return;
        }
    };
    if tx.send(Input::Connected(conn, stream)).is_err() {
        return;
    }
    let spawned = std::thread::Builder::new().name(format!("conn-{conn}")).spawn(move || {
        let mut reader = BufReader::with_capacity(1 << 16, reader);
        loop {
            let input = match read_message(&mut reader) {
                Ok(msg) => match ToServer::from_message(msg) {
                    Ok(m) => Input::Message(conn, m),
                    Err(e) => Input::Fault(conn, e),
                },
                Err(ProtocolError::ConnectionLost) => break,
                Err(e) => {
                    let _ = tx.send(Input::Fault(conn, e));
                    break;
                }
            };
            if tx.send(input).is_err() {
                return;
            }
        }
        let _ = tx.send(Input::Closed(conn));
    });
    if let Err(e) = spawned {
        log::error!("cannot spawn connection reader: {e}");
    }
}

/// Upper bound on inputs handled before the loop flushes its output.
const MAX_BATCH: usize = 8192;

fn run_reactor(mut reactor: Reactor, inputs: Receiver<Input>, events: Sender<Vec<SchedulerEvent>>) -> io::Result<()> {
    let mut writers: HashMap<ConnId, BufWriter<TcpStream>> = HashMap::new();
    let mut dirty: HashSet<ConnId> = HashSet::new();
    let mut broken: Vec<ConnId> = Vec::new();
    while !reactor.shutdown_requested() {
        let Ok(first) = inputs.recv() else { break };
        let mut next = Some(first);
        let mut handled = 0;
        while let Some(input) = next.take() {
            match input {
                Input::Connected(conn, stream) => {
                    writers.insert(conn, BufWriter::with_capacity(1 << 16, stream));
                    reactor.connected(conn);
                }
                Input::Message(conn, msg) => {
                    if let Err(e) = reactor.handle(conn, msg) {
                        log::warn!("protocol fault on connection {conn}: {e}");
                        broken.push(conn);
                    }
                }
                Input::Fault(conn, e) => {
                    log::warn!("protocol fault on connection {conn}: {e}");
                    broken.push(conn);
                }
                Input::Closed(conn) => {
                    writers.remove(&conn);
                    dirty.remove(&conn);
                    reactor.disconnected(conn);
                }
                Input::Update(update) => reactor.apply_update(update),
            }
            handled += 1;
            if handled < MAX_BATCH {
                next = inputs.try_recv().ok();
            }
        }

        for (conn, msg) in reactor.out.messages.drain(..) {
            if let Some(w) = writers.get_mut(&conn) {
                if let Err(e) = write_message(w, &msg) {
                    log::warn!("write to connection {conn} failed: {e}");
                    broken.push(conn);
                }
                dirty.insert(conn);
            }
        }
        for conn in dirty.drain() {
            if let Some(w) = writers.get_mut(&conn) {
                if let Err(e) = w.flush() {
                    log::warn!("flush to connection {conn} failed: {e}");
                    broken.push(conn);
                }
            }
        }
        broken.append(&mut reactor.out.close);
        for conn in broken.drain(..) {
            // The reader thread notices and reports the connection closed.
            if let Some(w) = writers.get(&conn) {
                let _ = w.get_ref().shutdown(Shutdown::Both);
            }
        }
        if !reactor.out.events.is_empty() && events.send(std::mem::take(&mut reactor.out.events)).is_err() {
            return Err(io::Error::other("scheduler thread stopped"));
        }
        reactor.flush_trace();
    }
    reactor.flush_trace();
    for w in writers.values_mut() {
        let _ = w.flush();
        let _ = w.get_ref().shutdown(Shutdown::Both);
    }
    log::info!("server stopped");
    Ok(())
}

fn run_scheduler(
    config: SchedulerConfig,
    events: Receiver<Vec<SchedulerEvent>>,
    updates: Sender<Input>,
    mut log_file: Option<BufWriter<File>>,
) {
    let mut scheduler = create_scheduler(&config);
    while let Ok(mut batch) = events.recv() {
        while let Ok(more) = events.try_recv() {
            batch.extend(more);
        }
        let update = match log_file.as_mut() {
            Some(file) => {
                let update = scheduler.step(batch.clone());
                let entry = SchedulerLogEntry { events: batch, update };
                let written = serde_json::to_writer(&mut *file, &entry)
                    .map_err(io::Error::from)
                    .and_then(|_| file.write_all(b"\n"))
                    .and_then(|_| file.flush());
                if let Err(e) = written {
                    log::error!("cannot write scheduler log: {e}");
                }
                entry.update
            }
            None => scheduler.step(batch),
        };
        if !update.is_empty() && updates.send(Input::Update(update)).is_err() {
            break;
        }
    }
}
