use std::io::Write;
use std::path::PathBuf;

use clap::Parser;
use dtask::net::init_logging;
use dtask::server::{self, ServerConfig};
use dtask_core::scheduler::{SchedulerConfig, SchedulerKind};

/// Task graph server: accepts workers and clients and schedules submitted graphs.
#[derive(Parser, Debug)]
#[command(name = "dtask-server", version)]
struct Args {
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Port to listen on; 0 picks a free one.
    #[arg(long, default_value_t = 7070)]
    port: u16,
    /// `ws` (work stealing) or `random`.
    #[arg(long, default_value = "ws")]
    scheduler: SchedulerKind,
    /// Seed of the random scheduler.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Transfer-cost weight of inputs held on the same node as the candidate worker.
    #[arg(long)]
    same_node_factor: Option<f64>,
    /// Extra queued tasks a worker keeps before it gives tasks to idle workers.
    #[arg(long)]
    donor_slack: Option<usize>,
    #[arg(long, default_value = "info")]
    log_level: String,
    /// Write the task event trace to this file.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the scheduler step log (JSON lines) to this file.
    #[arg(long)]
    sched_log: Option<PathBuf>,
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    init_logging(&args.log_level);
    let defaults = SchedulerConfig::default();
    let config = ServerConfig {
        bind: format!("{}:{}", args.host, args.port),
        scheduler: SchedulerConfig {
            kind: args.scheduler,
            seed: args.seed,
            same_node_factor: args.same_node_factor.unwrap_or(defaults.same_node_factor),
            donor_slack: args.donor_slack.unwrap_or(defaults.donor_slack),
        },
        trace: args.trace,
        sched_log: args.sched_log,
    };
    let handle = server::start(config)?;
    println!("listening on {}", handle.addr());
    std::io::stdout().flush()?;
    handle.join()?;
    Ok(())
}
