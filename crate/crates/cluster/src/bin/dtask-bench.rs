use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use dtask::harness::{
    load_graph, run_benchmark, scaling_sweep, write_sweep, BenchConfig, BinPaths, ClusterSpec, Launch,
};
use dtask::net::init_logging;
use dtask_core::metrics::{read_records, summarize, write_records, BenchRecord, RunStatus, WorkerMode};
use dtask_core::payload::{DurationMode, ExecOptions};
use dtask_core::scheduler::{SchedulerConfig, SchedulerKind};

/// Benchmark harness: runs graphs on fresh local clusters and compares results.
#[derive(Parser, Debug)]
#[command(name = "dtask-bench", version)]
struct Cli {
    #[arg(long, default_value = "warn", global = true)]
    log_level: String,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run one benchmark configuration and append its records to a CSV file.
    Run {
        /// Graph file, or a family such as `merge:n=10000` or `merge_slow:n=100,t=100`.
        #[arg(long)]
        graph: String,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Print per-graph speedups and their geometric mean against a baseline label.
    Summarize {
        #[arg(long)]
        csv: PathBuf,
        /// Configuration label, e.g. `ws`, `random` or `ws-zero`.
        #[arg(long, default_value = "ws")]
        baseline: String,
    },
    /// Run a graph family on several cluster sizes.
    Sweep {
        #[arg(long)]
        family: String,
        /// Comma separated worker counts.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        workers: Vec<usize>,
        /// Makespan-versus-workers table; printed when absent.
        #[arg(long)]
        sweep_out: Option<PathBuf>,
        #[command(flatten)]
        opts: RunOpts,
    },
}

#[derive(Args, Debug)]
struct RunOpts {
    #[arg(long, default_value = "ws")]
    scheduler: SchedulerKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Use zero workers that complete tasks without executing them.
    #[arg(long)]
    zero: bool,
    #[arg(long, default_value_t = 1.0)]
    duration_scale: f64,
    /// Comma separated per-worker multipliers of the duration scale.
    #[arg(long, value_delimiter = ',')]
    worker_scales: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    cores: u32,
    /// Number of distinct node identities the workers are spread over.
    #[arg(long, default_value_t = 1)]
    nodes: usize,
    /// Spin instead of sleeping for task durations.
    #[arg(long)]
    busy_wait: bool,
    /// Seconds before a run is recorded as timed out.
    #[arg(long, default_value_t = 300)]
    timeout: u64,
    /// Run server and workers as threads of this process instead of child processes.
    #[arg(long)]
    in_process: bool,
    /// Directory holding the server and worker executables; defaults to this program's.
    #[arg(long)]
    bin_dir: Option<PathBuf>,
    /// File listing one worker host per line; workers are started over ssh.
    #[arg(long)]
    hostfile: Option<PathBuf>,
    /// Name remote workers use to reach this machine.
    #[arg(long)]
    server_host: Option<String>,
    /// Directory receiving a trace and scheduler log per repetition.
    #[arg(long)]
    artifacts: Option<PathBuf>,
    /// Records CSV; appended to when it exists.
    #[arg(long, default_value = "results.csv")]
    out: PathBuf,
}

impl RunOpts {
    fn config(&self, graph: &str, workers: usize, log_level: &str) -> anyhow::Result<BenchConfig> {
        let (graph, graph_name) = load_graph(graph)?;
        let launch = if self.in_process {
            Launch::Threads
        } else {
            let bins = match &self.bin_dir {
                Some(dir) => BinPaths::in_dir(dir),
                None => BinPaths::next_to_current_exe()?,
            };
            let hosts = match &self.hostfile {
                Some(path) => std::fs::read_to_string(path)
                    .with_context(|| format!("cannot read {}", path.display()))?
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty() && !l.starts_with('#'))
                    .map(str::to_owned)
                    .collect(),
                None => Vec::new(),
            };
            Launch::Processes { bins, hosts, server_host: self.server_host.clone() }
        };
        Ok(BenchConfig {
            graph,
            graph_name,
            cluster: ClusterSpec {
                scheduler: SchedulerConfig { kind: self.scheduler, seed: self.seed, ..SchedulerConfig::default() },
                workers,
                cores_per_worker: self.cores,
                nodes: self.nodes,
                mode: if self.zero { WorkerMode::Zero } else { WorkerMode::Normal },
                exec: ExecOptions {
                    duration_scale: self.duration_scale,
                    duration_mode: if self.busy_wait { DurationMode::BusyWait } else { DurationMode::Sleep },
                },
                worker_scales: self.worker_scales.clone(),
                trace: None,
                sched_log: None,
                launch,
                log_level: log_level.to_owned(),
            },
            reps: self.reps,
            timeout: Duration::from_secs(self.timeout),
            artifacts: self.artifacts.clone(),
        })
    }
}

fn append_records(path: &Path, records: &[BenchRecord]) -> anyhow::Result<()> {
    let exists = path.metadata().map(|m| m.len() > 0).unwrap_or(false);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = BufWriter::new(file);
    write_records(records, &mut w, !exists)?;
    w.flush()?;
    Ok(())
}

fn print_records(records: &[BenchRecord]) {
    for r in records {
        let status = match r.status {
            RunStatus::Ok => String::new(),
            other => format!(" ({other:?})"),
        };
        println!(
            "{} {} {}w rep {}: makespan {:.4} s, aot {:.4} ms{status}",
            r.graph_name,
            r.label(),
            r.workers,
            r.repetition,
            r.makespan,
            r.aot
        );
    }
}

/// Accepts scheduler aliases such as `ws` or `ws-zero` in labels.
fn canonical_label(label: &str) -> String {
    let (name, suffix) = match label.strip_suffix("-zero") {
        Some(name) => (name, "-zero"),
        None => (label, ""),
    };
    match name.parse::<SchedulerKind>() {
        Ok(kind) => format!("{kind}{suffix}"),
        Err(_) => label.to_owned(),
    }
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    init_logging(&cli.log_level);
    match cli.command {
        Cmd::Run { graph, workers, opts } => {
            let config = opts.config(&graph, workers, &cli.log_level)?;
            let records = run_benchmark(&config)?;
            print_records(&records);
            append_records(&opts.out, &records)?;
        }
        Cmd::Summarize { csv, baseline } => {
            let records = read_records(File::open(&csv).with_context(|| format!("cannot open {}", csv.display()))?)?;
            let baseline = canonical_label(&baseline);
            let mut labels: Vec<String> = records.iter().map(BenchRecord::label).collect();
            labels.sort();
            labels.dedup();
            if !labels.contains(&baseline) {
                anyhow::bail!("no `{baseline}` records in {}", csv.display());
            }
            for label in labels {
                match summarize(&records, &baseline, &label) {
                    Ok(summary) => {
                        println!("{} vs {}: geomean speedup {:.4}", summary.candidate, summary.baseline, summary.geomean);
                        for (graph, s) in &summary.speedups {
                            println!("  {graph}: {s:.4}");
                        }
                    }
                    Err(e) => println!("{label} vs {baseline}: skipped, {e}"),
                }
            }
        }
        Cmd::Sweep { family, workers, sweep_out, opts } => {
            let config = opts.config(&family, 1, &cli.log_level)?;
            let (records, points) = scaling_sweep(&config, &workers)?;
            print_records(&records);
            append_records(&opts.out, &records)?;
            match sweep_out {
                Some(path) => write_sweep(&points, BufWriter::new(File::create(path)?))?,
                None => write_sweep(&points, std::io::stdout().lock())?,
            }
        }
    }
    Ok(())
}
