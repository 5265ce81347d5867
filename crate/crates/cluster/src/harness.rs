//! Benchmark orchestration: launches a fresh server and workers for every
//! repetition, submits a graph through the client SDK and records makespan
//! and average overhead per task.

use std::io::{BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context};
use dtask_core::metrics::{BenchRecord, RunStatus, WorkerMode};
use dtask_core::payload::{DurationMode, ExecOptions};
use dtask_core::scheduler::SchedulerConfig;
use dtask_core::{TaskGraph, TaskId};

use crate::client::{Client, ClientError};
use crate::server::{self, ServerConfig, ServerHandle};
use crate::worker::{spawn_worker, WorkerConfig, WorkerReport};

/// Per-execution timeout used by the benchmarks.
pub const DEFAULT_RUN_TIMEOUT: Duration = Duration::from_secs(300);
/// How long a fresh cluster may take until every worker has registered.
const STARTUP_TIMEOUT: Duration = Duration::from_secs(60);
/// How long processes get to exit on their own after a shutdown request.
const EXIT_GRACE: Duration = Duration::from_secs(10);

/// Locations of the server and worker executables.
#[derive(Debug, Clone)]
pub struct BinPaths {
    pub server: PathBuf,
    pub worker: PathBuf,
}

impl BinPaths {
    pub fn in_dir(dir: &Path) -> BinPaths {
        BinPaths { server: dir.join("dtask-server"), worker: dir.join("dtask-worker") }
    }

    /// Executables installed next to the running program.
    pub fn next_to_current_exe() -> anyhow::Result<BinPaths> {
        let exe = std::env::current_exe()?;
        let dir = exe.parent().ok_or_else(|| anyhow!("executable has no parent directory"))?;
        Ok(BinPaths::in_dir(dir))
    }
}

/// How cluster members are started.
#[derive(Debug, Clone)]
pub enum Launch {
    /// Server and workers run as threads of the calling process.
    Threads,
    /// Server and workers run as separate processes.
    Processes {
        bins: BinPaths,
        /// Hosts for remote workers, used round-robin over ssh; workers
        /// run locally when empty.
        hosts: Vec<String>,
        /// Address remote workers use to reach the server.
        server_host: Option<String>,
    },
}

#[derive(Debug, Clone)]
pub struct ClusterSpec {
    pub scheduler: SchedulerConfig,
    pub workers: usize,
    pub cores_per_worker: u32,
    /// Workers are spread round-robin over this many node identities.
    pub nodes: usize,
    pub mode: WorkerMode,
    pub exec: ExecOptions,
    /// Per-worker multipliers of `exec.duration_scale`; missing entries are 1.
    pub worker_scales: Vec<f64>,
    pub trace: Option<PathBuf>,
    pub sched_log: Option<PathBuf>,
    pub launch: Launch,
    /// Log level passed to launched processes.
    pub log_level: String,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        ClusterSpec {
            scheduler: SchedulerConfig::default(),
            workers: 1,
            cores_per_worker: 1,
            nodes: 1,
            mode: WorkerMode::Normal,
            exec: ExecOptions::default(),
            worker_scales: Vec::new(),
            trace: None,
            sched_log: None,
            launch: Launch::Threads,
            log_level: "warn".into(),
        }
    }
}

impl ClusterSpec {
    fn worker_config(&self, index: usize, server: SocketAddr) -> WorkerConfig {
        let scale = self.worker_scales.get(index).copied().unwrap_or(1.0);
        WorkerConfig {
            server: server.to_string(),
            cores: self.cores_per_worker,
            node_id: format!("node{}", index % self.nodes.max(1)),
            mode: self.mode,
            exec: ExecOptions { duration_scale: self.exec.duration_scale * scale, ..self.exec },
            ..WorkerConfig::default()
        }
    }
}

enum ServerSide {
    Thread(ServerHandle),
    Process(Child),
}

enum WorkerSide {
    Thread(JoinHandle<anyhow::Result<WorkerReport>>),
    Process(Child),
}

/// A server with its workers, all registered and idle.
pub struct LocalCluster {
    addr: SocketAddr,
    server: Option<ServerSide>,
    workers: Vec<WorkerSide>,
}

fn spawn_server_process(bins: &BinPaths, spec: &ClusterSpec, bind_host: &str) -> anyhow::Result<(Child, SocketAddr)> {
    let mut cmd = Command::new(&bins.server);
    cmd.args(["--host", bind_host, "--port", "0"])
        .args(["--scheduler", spec.scheduler.kind.as_str()])
        .args(["--seed", &spec.scheduler.seed.to_string()])
        .args(["--same-node-factor", &spec.scheduler.same_node_factor.to_string()])
        .args(["--donor-slack", &spec.scheduler.donor_slack.to_string()])
        .args(["--log-level", &spec.log_level])
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit());
    if let Some(p) = &spec.trace {
        cmd.arg("--trace").arg(p);
    }
    if let Some(p) = &spec.sched_log {
        cmd.arg("--sched-log").arg(p);
    }
    let mut child = cmd.spawn().with_context(|| format!("cannot start {}", bins.server.display()))?;
    let stdout = child.stdout.take().expect("stdout is piped");
    let mut line = String::new();
    BufReader::new(stdout).read_line(&mut line)?;
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .and_then(|a| a.parse::<SocketAddr>().ok())
        .ok_or_else(|| anyhow!("server did not report its address (got {line:?})"));
    match addr {
        Ok(addr) => Ok((child, addr)),
        Err(e) => {
            let _ = child.kill();
            let _ = child.wait();
            Err(e)
        }
    }
}

fn worker_args(config: &WorkerConfig, log_level: &str) -> Vec<String> {
    let mut args = vec![
        "--server".into(),
        config.server.clone(),
        "--cores".into(),
        config.cores.to_string(),
        "--node-id".into(),
        config.node_id.clone(),
        "--listen".into(),
        config.listen.clone(),
        "--duration-scale".into(),
        config.exec.duration_scale.to_string(),
        "--log-level".into(),
        log_level.into(),
    ];
    if let Some(h) = &config.advertise_host {
        args.extend(["--advertise-host".into(), h.clone()]);
    }
    if config.mode == WorkerMode::Zero {
        args.push("--zero".into());
    }
    if config.exec.duration_mode == DurationMode::BusyWait {
        args.push("--busy-wait".into());
    }
    args
}

fn wait_with_grace(child: &mut Child, grace: Duration) {
    let deadline = Instant::now() + grace;
    while Instant::now() < deadline {
        match child.try_wait() {
            Ok(Some(_)) | Err(_) => return,
            Ok(None) => std::thread::sleep(Duration::from_millis(20)),
        }
    }
    let _ = child.kill();
    let _ = child.wait();
}

impl LocalCluster {
    /// Starts a server and `spec.workers` workers and waits until all of
    /// them have registered.
    pub fn start(spec: &ClusterSpec) -> anyhow::Result<LocalCluster> {
        if spec.workers == 0 {
            bail!("a cluster needs at least one worker");
        }
        let mut cluster = match &spec.launch {
            Launch::Threads => {
                let handle = server::start(ServerConfig {
                    bind: "127.0.0.1:0".into(),
                    scheduler: spec.scheduler.clone(),
                    trace: spec.trace.clone(),
                    sched_log: spec.sched_log.clone(),
                })?;
                let addr = handle.addr();
                let mut cluster = LocalCluster { addr, server: Some(ServerSide::Thread(handle)), workers: Vec::new() };
                for i in 0..spec.workers {
                    cluster.workers.push(WorkerSide::Thread(spawn_worker(spec.worker_config(i, addr))?));
                }
                cluster
            }
            Launch::Processes { bins, hosts, server_host } => {
                let bind_host = if hosts.is_empty() { "127.0.0.1" } else { "0.0.0.0" };
                let (child, mut addr) = spawn_server_process(bins, spec, bind_host)?;
                let mut cluster = LocalCluster { addr, server: Some(ServerSide::Process(child)), workers: Vec::new() };
                let worker_target = match server_host {
                    Some(h) if !hosts.is_empty() => format!("{h}:{}", addr.port()),
                    _ => {
                        if addr.ip().is_unspecified() {
                            addr.set_ip(std::net::Ipv4Addr::LOCALHOST.into());
                            cluster.addr = addr;
                        }
                        addr.to_string()
                    }
                };
                for i in 0..spec.workers {
                    let mut config = spec.worker_config(i, addr);
                    config.server = worker_target.clone();
                    let mut cmd = if hosts.is_empty() {
                        let mut c = Command::new(&bins.worker);
                        c.args(worker_args(&config, &spec.log_level));
                        c
                    } else {
                        let host = &hosts[i % hosts.len()];
                        config.listen = "0.0.0.0:0".into();
                        config.advertise_host = Some(host.clone());
                        config.node_id = host.clone();
                        let mut c = Command::new("ssh");
                        c.arg(host).arg(&bins.worker).args(worker_args(&config, &spec.log_level));
                        c
                    };
                    cmd.stdin(Stdio::null()).stdout(Stdio::null()).stderr(Stdio::inherit());
                    let child = cmd.spawn().with_context(|| format!("cannot start worker {i}"))?;
                    cluster.workers.push(WorkerSide::Process(child));
                }
                cluster
            }
        };
        let mut client = cluster.client()?;
        if let Err(e) = client.wait_for_workers(spec.workers as u64, STARTUP_TIMEOUT) {
            cluster.kill();
            return Err(anyhow!("workers did not register: {e}"));
        }
        Ok(cluster)
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn client(&self) -> Result<Client, ClientError> {
        Client::connect(self.addr)
    }

    /// Asks the server to stop, waits for every member and returns the
    /// reports of in-process workers.
    pub fn shutdown(mut self) -> anyhow::Result<Vec<WorkerReport>> {
        let requested = self.client().and_then(Client::shutdown);
        if let Err(e) = &requested {
            log::warn!("shutdown request failed: {e}");
        }
        let mut reports = Vec::new();
        let mut first_error = None;
        match self.server.take() {
            Some(ServerSide::Thread(h)) => {
                if let Err(e) = h.join() {
                    first_error.get_or_insert(anyhow::Error::from(e));
                }
            }
            Some(ServerSide::Process(mut c)) => wait_with_grace(&mut c, EXIT_GRACE),
            None => {}
        }
        for w in self.workers.drain(..) {
            match w {
                WorkerSide::Thread(h) => match h.join() {
                    Ok(Ok(r)) => reports.push(r),
                    Ok(Err(e)) => {
                        first_error.get_or_insert(e);
                    }
                    Err(_) => {
                        first_error.get_or_insert(anyhow!("worker thread panicked"));
                    }
                },
                WorkerSide::Process(mut c) => wait_with_grace(&mut c, EXIT_GRACE),
            }
        }
        match first_error {
            Some(e) => Err(e),
            None => Ok(reports),
        }
    }

    /// Kills child processes immediately; in-process members are only
    /// asked to stop.
    fn kill(&mut self) {
        if let Ok(c) = self.client() {
            let _ = c.shutdown();
        }
        if let Some(ServerSide::Process(c)) = &mut self.server {
            let _ = c.kill();
            let _ = c.wait();
        }
        for w in &mut self.workers {
            if let WorkerSide::Process(c) = w {
                let _ = c.kill();
                let _ = c.wait();
            }
        }
    }
}

impl Drop for LocalCluster {
    fn drop(&mut self) {
        if self.server.is_some() || !self.workers.is_empty() {
            self.kill();
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub graph: TaskGraph,
    pub graph_name: String,
    pub cluster: ClusterSpec,
    pub reps: usize,
    pub timeout: Duration,
    /// Directory receiving one trace and one scheduler log per repetition.
    pub artifacts: Option<PathBuf>,
}

/// Outcome of one repetition.
#[derive(Debug, Clone)]
pub struct BenchRun {
    pub record: BenchRecord,
    pub outputs: std::collections::BTreeMap<TaskId, Vec<u8>>,
    pub error: Option<String>,
    pub trace: Option<PathBuf>,
    pub sched_log: Option<PathBuf>,
    pub worker_reports: Vec<WorkerReport>,
}

fn artifact_stem(config: &BenchConfig, rep: usize) -> String {
    let c = &config.cluster;
    let mode = match c.mode {
        WorkerMode::Normal => "",
        WorkerMode::Zero => "-zero",
    };
    let name: String =
        config.graph_name.chars().map(|ch| if ch.is_ascii_alphanumeric() || "-_.".contains(ch) { ch } else { '_' }).collect();
    format!("{name}-{}{mode}-{}w-r{rep}", c.scheduler.kind, c.workers)
}

/// Runs one repetition on a fresh cluster.
pub fn run_repetition(config: &BenchConfig, rep: usize) -> anyhow::Result<BenchRun> {
    let mut spec = config.cluster.clone();
    if let Some(dir) = &config.artifacts {
        std::fs::create_dir_all(dir)?;
        let stem = artifact_stem(config, rep);
        spec.trace = Some(dir.join(format!("{stem}.trace")));
        spec.sched_log = Some(dir.join(format!("{stem}.schedlog.jsonl")));
    }
    let cluster = LocalCluster::start(&spec)?;
    let mut client = cluster.client()?;
    client.set_timeout(config.timeout);
    let outcome = client.run(&config.graph);
    drop(client);
    let tasks = config.graph.len();
    let (status, makespan, outputs, error) = match outcome {
        Ok(r) => (RunStatus::Ok, r.makespan.as_secs_f64(), r.outputs, None),
        Err(ClientError::Timeout(t)) => (RunStatus::Timeout, t.as_secs_f64(), Default::default(), Some("timeout".into())),
        Err(e) => (RunStatus::Failed, f64::NAN, Default::default(), Some(e.to_string())),
    };
    if let Some(e) = &error {
        log::warn!("{} repetition {rep}: {e}", config.graph_name);
    }
    let worker_reports = cluster.shutdown()?;
    let record = BenchRecord {
        graph_name: config.graph_name.clone(),
        scheduler: spec.scheduler.kind.to_string(),
        workers: spec.workers,
        nodes: spec.nodes,
        mode: spec.mode,
        duration_scale: spec.exec.duration_scale,
        repetition: rep,
        tasks,
        status,
        makespan,
        aot: BenchRecord::aot_ms(makespan, tasks),
    };
    Ok(BenchRun { record, outputs, error, trace: spec.trace, sched_log: spec.sched_log, worker_reports })
}

/// Runs every repetition, each on a freshly started cluster.
pub fn run_benchmark_runs(config: &BenchConfig) -> anyhow::Result<Vec<BenchRun>> {
    (0..config.reps).map(|rep| run_repetition(config, rep)).collect()
}

pub fn run_benchmark(config: &BenchConfig) -> anyhow::Result<Vec<BenchRecord>> {
    Ok(run_benchmark_runs(config)?.into_iter().map(|r| r.record).collect())
}

/// Mean makespan of the successful runs at one cluster size.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub workers: usize,
    pub mean_makespan: f64,
    pub successful_runs: usize,
}

/// Runs the benchmark once per worker count.
pub fn scaling_sweep(base: &BenchConfig, worker_counts: &[usize]) -> anyhow::Result<(Vec<BenchRecord>, Vec<SweepPoint>)> {
    let mut records = Vec::new();
    let mut points = Vec::new();
    for &workers in worker_counts {
        let mut config = base.clone();
        config.cluster.workers = workers;
        let batch = run_benchmark(&config)?;
        let ok: Vec<f64> = batch.iter().filter(|r| r.status == RunStatus::Ok).map(|r| r.makespan).collect();
        let mean_makespan = if ok.is_empty() { f64::NAN } else { ok.iter().sum::<f64>() / ok.len() as f64 };
        points.push(SweepPoint { workers, mean_makespan, successful_runs: ok.len() });
        records.extend(batch);
    }
    Ok((records, points))
}

/// Makespan-versus-workers table as CSV.
pub fn write_sweep(points: &[SweepPoint], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "workers,mean_makespan,successful_runs")?;
    for p in points {
        writeln!(out, "{},{},{}", p.workers, p.mean_makespan, p.successful_runs)?;
    }
    Ok(())
}

/// Loads a graph from a graph file, or generates it from a family
/// description such as `merge_slow:n=100,t=100`. Returns the graph and the
/// name used in benchmark records.
pub fn load_graph(source: &str) -> anyhow::Result<(TaskGraph, String)> {
    let path = Path::new(source);
    if path.is_file() {
        let file = std::fs::File::open(path)?;
        let graph = dtask_core::graphfile::read_graph(BufReader::new(file))
            .with_context(|| format!("cannot read graph file {source}"))?;
        let name = path.file_stem().map_or_else(|| source.to_owned(), |s| s.to_string_lossy().into_owned());
        return Ok((graph, name));
    }
    let family: dtask_core::benchgen::GraphFamily =
        source.parse().with_context(|| format!("`{source}` is neither a graph file nor a graph family"))?;
    Ok((family.generate()?, family.name()))
}
