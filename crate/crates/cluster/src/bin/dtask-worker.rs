use clap::Parser;
use dtask::net::init_logging;
use dtask::worker::{run_worker, WorkerConfig};
use dtask_core::metrics::WorkerMode;
use dtask_core::payload::{DurationMode, ExecOptions};

/// Task graph worker: executes tasks assigned by the server.
#[derive(Parser, Debug)]
#[command(name = "dtask-worker", version)]
struct Args {
    /// Server address, `host:port`.
    #[arg(long)]
    server: String,
    #[arg(long, default_value_t = 1)]
    cores: u32,
    /// Node identity; workers sharing it are treated as co-located.
    #[arg(long, default_value = "localhost")]
    node_id: String,
    /// Address of the peer data listener.
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,
    /// Host name announced to peers instead of the listener address.
    #[arg(long)]
    advertise_host: Option<String>,
    /// Complete every task instantly without executing it.
    #[arg(long)]
    zero: bool,
    /// Multiplier applied to every task duration.
    #[arg(long, default_value_t = 1.0)]
    duration_scale: f64,
    /// Spin instead of sleeping for task durations.
    #[arg(long)]
    busy_wait: bool,
    /// Threads downloading inputs from other workers.
    #[arg(long, default_value_t = 4)]
    fetch_threads: usize,
    #[arg(long, default_value = "info")]
    log_level: String,
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    init_logging(&args.log_level);
    let config = WorkerConfig {
        server: args.server,
        cores: args.cores,
        node_id: args.node_id,
        listen: args.listen,
        advertise_host: args.advertise_host,
        mode: if args.zero { WorkerMode::Zero } else { WorkerMode::Normal },
        exec: ExecOptions {
            duration_scale: args.duration_scale,
            duration_mode: if args.busy_wait { DurationMode::BusyWait } else { DurationMode::Sleep },
        },
        fetch_threads: args.fetch_threads,
    };
    let report = run_worker(config)?;
    log::info!("{report:?}");
    Ok(())
}
