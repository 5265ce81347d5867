use std::cmp::Reverse;
use std::collections::{BTreeSet, HashMap};
use std::io::{BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};

use crossbeam_channel::{unbounded, Receiver};
use dtask_core::payload::{execute_payload, ExecOptions};
use dtask_core::protocol::{
    read_message, write_message, InputLocation, PeerMessage, ProtocolError, ToServer, ToWorker,
};
use dtask_core::{PayloadSpec, TaskId};

use super::{serve_peers, ServerLink, WorkerConfig, WorkerReport};
use crate::net;

type Store = Mutex<HashMap<TaskId, Arc<Vec<u8>>>>;

/// Runnable order: highest priority first, then assignment order.
type RunKey = (Reverse<i64>, u64, TaskId);

struct Queued {
    payload: PayloadSpec,
    inputs: Vec<TaskId>,
    priority: i64,
    seq: u64,
    /// Inputs still being downloaded.
    missing: usize,
}

impl Queued {
    fn key(&self, task: TaskId) -> RunKey {
        (Reverse(self.priority), self.seq, task)
    }
}

#[derive(Default)]
struct Queue {
    /// Assigned tasks that have not started yet.
    tasks: HashMap<TaskId, Queued>,
    runnable: BTreeSet<RunKey>,
    /// Inputs being downloaded, with the tasks waiting for each.
    inflight: HashMap<TaskId, Vec<TaskId>>,
    next_seq: u64,
    stopping: bool,
}

struct Shared {
    queue: Mutex<Queue>,
    wakeup: Condvar,
    store: Arc<Store>,
    server: Mutex<BufWriter<TcpStream>>,
    exec: ExecOptions,
    running: AtomicUsize,
    max_running: AtomicUsize,
    completed: AtomicU64,
    fetched: AtomicU64,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

impl Shared {
    /// Sends one message to the server. A broken connection is noticed and
    /// handled by the reader thread, so write errors are only logged.
    fn send(&self, msg: ToServer) {
        let mut w = lock(&self.server);
        if let Err(e) = write_message(&mut *w, &msg.into_message()).and_then(|_| w.flush().map_err(Into::into)) {
            log::debug!("cannot write to server: {e}");
        }
    }

    fn erred(&self, task: TaskId, error: String) {
        log::warn!("task {task} failed: {error}");
        self.send(ToServer::TaskErred { task, error });
    }
}

struct FetchJob {
    input: TaskId,
    addresses: Vec<String>,
}

pub(super) fn run(config: &WorkerConfig, link: ServerLink, listener: TcpListener) -> anyhow::Result<WorkerReport> {
    let ServerLink { worker_id, mut reader, writer } = link;
    let store: Arc<Store> = Arc::default();
    let peer_store = store.clone();
    let mut peers = serve_peers(listener, Arc::new(move |task| lock(&peer_store).get(&task).map(|d| d.to_vec())))?;
    let shared = Arc::new(Shared {
        queue: Mutex::default(),
        wakeup: Condvar::new(),
        store,
        server: Mutex::new(writer),
        exec: config.exec,
        running: AtomicUsize::new(0),
        max_running: AtomicUsize::new(0),
        completed: AtomicU64::new(0),
        fetched: AtomicU64::new(0),
    });

    let mut executors = Vec::new();
    for slot in 0..config.cores {
        let shared = shared.clone();
        executors.push(std::thread::Builder::new().name(format!("exec-{slot}")).spawn(move || execute_loop(&shared))?);
    }
    let (fetch_tx, fetch_rx) = unbounded::<FetchJob>();
    for i in 0..config.fetch_threads.max(1) {
        let shared = shared.clone();
        let jobs = fetch_rx.clone();
        std::thread::Builder::new().name(format!("fetch-{i}")).spawn(move || fetch_loop(&shared, jobs))?;
    }
    drop(fetch_rx);

    let mut report = WorkerReport { worker_id, ..Default::default() };
    let result = loop {
        let msg = match read_message(&mut reader).and_then(ToWorker::from_message) {
            Ok(m) => m,
            Err(ProtocolError::ConnectionLost) => break Ok(()),
            Err(e) => break Err(anyhow::Error::from(e)),
        };
        match msg {
            ToWorker::AssignTask { task, payload, priority, inputs } => {
                for job in assign(&shared, task, payload, priority, inputs) {
                    // Fetch threads only stop once this sender is dropped.
                    let _ = fetch_tx.send(job);
                }
            }
            ToWorker::StealRequest { task } => {
                let success = {
                    let mut q = lock(&shared.queue);
                    match q.tasks.remove(&task) {
                        Some(queued) => {
                            q.runnable.remove(&queued.key(task));
                            true
                        }
                        None => false,
                    }
                };
                if success {
                    report.steals_granted += 1;
                } else {
                    report.steals_refused += 1;
                }
                shared.send(ToServer::StealResponse { task, success });
            }
            ToWorker::FetchData { task } => {
                let data = lock(&shared.store).get(&task).map(|d| d.to_vec());
                shared.send(ToServer::DataReply { task, data });
            }
            ToWorker::ReleaseData { tasks } => {
                let mut store = lock(&shared.store);
                for t in tasks {
                    store.remove(&t);
                }
            }
            ToWorker::Registered { .. } => {}
            ToWorker::Shutdown => break Ok(()),
        }
    };

    drop(fetch_tx);
    lock(&shared.queue).stopping = true;
    shared.wakeup.notify_all();
    for e in executors {
        let _ = e.join();
    }
    peers.stop();
    report.completed = shared.completed.load(Ordering::Relaxed);
    report.max_running = shared.max_running.load(Ordering::Relaxed);
    report.fetched = shared.fetched.load(Ordering::Relaxed);
    log::info!("worker {worker_id} stopping after {} tasks", report.completed);
    result.map(|_| report)
}

/// Queues an assigned task and returns the downloads it still needs.
fn assign(shared: &Shared, task: TaskId, payload: PayloadSpec, priority: i64, inputs: Vec<InputLocation>) -> Vec<FetchJob> {
    let mut jobs = Vec::new();
    let mut q = lock(&shared.queue);
    let mut missing = 0;
    {
        // The store is checked under the queue lock; a completed download
        // is stored before its waiters are released, so no input is missed.
        let store = lock(&shared.store);
        for input in &inputs {
            if store.contains_key(&input.task) {
                continue;
            }
            missing += 1;
            match q.inflight.get_mut(&input.task) {
                Some(waiters) => waiters.push(task),
                None => {
                    q.inflight.insert(input.task, vec![task]);
                    jobs.push(FetchJob { input: input.task, addresses: input.addresses.clone() });
                }
            }
        }
    }
    let seq = q.next_seq;
    q.next_seq += 1;
    let queued = Queued { payload, inputs: inputs.iter().map(|i| i.task).collect(), priority, seq, missing };
    if missing == 0 {
        q.runnable.insert(queued.key(task));
    }
    q.tasks.insert(task, queued);
    drop(q);
    if missing == 0 {
        shared.wakeup.notify_one();
    }
    jobs
}

fn execute_loop(shared: &Shared) {
    loop {
        let (task, queued) = {
            let mut q = lock(&shared.queue);
            loop {
                if q.stopping {
                    return;
                }
                if let Some((_, _, task)) = q.runnable.pop_first() {
                    let queued = q.tasks.remove(&task).expect("runnable task is queued");
                    break (task, queued);
                }
                q = shared.wakeup.wait(q).unwrap_or_else(|p| p.into_inner());
            }
        };
        let now = shared.running.fetch_add(1, Ordering::AcqRel) + 1;
        shared.max_running.fetch_max(now, Ordering::AcqRel);
        let inputs: Option<Vec<Arc<Vec<u8>>>> = {
            let store = lock(&shared.store);
            queued.inputs.iter().map(|i| store.get(i).cloned()).collect()
        };
        let outcome = match inputs {
            Some(data) => {
                let slices: Vec<&[u8]> = data.iter().map(|d| d.as_slice()).collect();
                execute_payload(task, &queued.payload, &slices, &shared.exec).map_err(|e| e.to_string())
            }
            None => Err("an input was released before the task started".to_owned()),
        };
        shared.running.fetch_sub(1, Ordering::AcqRel);
        match outcome {
            Ok(data) => {
                let size = data.len() as u64;
                lock(&shared.store).insert(task, Arc::new(data));
                shared.completed.fetch_add(1, Ordering::Relaxed);
                shared.send(ToServer::TaskFinished { task, size });
            }
            Err(error) => shared.erred(task, error),
        }
    }
}

struct PeerConn {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

fn fetch_from(conns: &mut HashMap<String, PeerConn>, address: &str, input: TaskId) -> Result<Option<Vec<u8>>, ProtocolError> {
    if !conns.contains_key(address) {
        let stream = net::connect(address)?;
        let writer = BufWriter::new(stream.try_clone()?);
        conns.insert(address.to_owned(), PeerConn { reader: BufReader::new(stream), writer });
    }
    let conn = conns.get_mut(address).expect("connection was just inserted");
    let exchange = (|| {
        write_message(&mut conn.writer, &PeerMessage::FetchData { task: input }.into_message())?;
        conn.writer.flush()?;
        match PeerMessage::from_message(read_message(&mut conn.reader)?)? {
            PeerMessage::DataReply { task, data } if task == input => Ok(data),
            other => Err(ProtocolError::malformed(format!("unexpected peer reply {other:?}"))),
        }
    })();
    if exchange.is_err() {
        conns.remove(address);
    }
    exchange
}

fn fetch_loop(shared: &Shared, jobs: Receiver<FetchJob>) {
    let mut conns: HashMap<String, PeerConn> = HashMap::new();
    while let Ok(job) = jobs.recv() {
        let mut data = None;
        for address in &job.addresses {
            match fetch_from(&mut conns, address, job.input) {
                Ok(Some(bytes)) => {
                    data = Some(bytes);
                    break;
                }
                Ok(None) => log::debug!("peer {address} no longer holds {}", job.input),
                Err(e) => log::warn!("fetching {} from {address} failed: {e}", job.input),
            }
        }
        match data {
            Some(bytes) => {
                shared.fetched.fetch_add(1, Ordering::Relaxed);
                lock(&shared.store).insert(job.input, Arc::new(bytes));
                shared.send(ToServer::DataPlaced { task: job.input });
                let mut q = lock(&shared.queue);
                let mut woke = 0;
                for waiter in q.inflight.remove(&job.input).unwrap_or_default() {
                    let Some(queued) = q.tasks.get_mut(&waiter) else { continue };
                    queued.missing -= 1;
                    if queued.missing == 0 {
                        let key = queued.key(waiter);
                        q.runnable.insert(key);
                        woke += 1;
                    }
                }
                drop(q);
                for _ in 0..woke {
                    shared.wakeup.notify_one();
                }
            }
            None => {
                let failed: Vec<TaskId> = {
                    let mut q = lock(&shared.queue);
                    let waiters = q.inflight.remove(&job.input).unwrap_or_default();
                    waiters.into_iter().filter(|w| q.tasks.remove(w).is_some()).collect()
                };
                for task in failed {
                    shared.erred(task, format!("input {} could not be downloaded", job.input));
                }
            }
        }
    }
}
