use std::path::PathBuf;
use std::time::Duration;

use clap::{Parser, Subcommand};
use dtask::client::Client;
use dtask::net::init_logging;
use dtask_core::graphfile::read_graph;
use dtask_core::payload::decode_u64;
use dtask_core::TaskId;

/// Command line client for a task graph server.
#[derive(Parser, Debug)]
#[command(name = "dtask-client", version)]
struct Args {
    /// Server address, `host:port`.
    #[arg(long, default_value = "127.0.0.1:7070")]
    server: String,
    /// Seconds to wait for replies.
    #[arg(long, default_value_t = 300)]
    timeout: u64,
    #[arg(long, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Submit a graph file and print its outputs and makespan.
    Submit {
        #[arg(long)]
        graph: PathBuf,
        /// Comma separated output task ids; defaults to the file's outputs.
        #[arg(long, value_delimiter = ',')]
        outputs: Option<Vec<TaskId>>,
    },
    /// Print the number of workers and task counts per state.
    Status,
    /// Stop the server and its workers.
    Shutdown,
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    init_logging(&args.log_level);
    let mut client = Client::connect(args.server.as_str())?;
    client.set_timeout(Duration::from_secs(args.timeout));
    match args.command {
        Cmd::Submit { graph, outputs } => {
            let file = std::fs::File::open(&graph)?;
            let mut g = read_graph(std::io::BufReader::new(file))?;
            if let Some(o) = outputs {
                g.outputs = o;
            }
            let result = client.run(&g)?;
            for (task, data) in &result.outputs {
                match decode_u64(data) {
                    Some(v) if data.len() == 8 => println!("task {task}: {} bytes, u64 {v}", data.len()),
                    _ => println!("task {task}: {} bytes", data.len()),
                }
            }
            println!("makespan {:.6} s", result.makespan.as_secs_f64());
        }
        Cmd::Status => {
            let (workers, s) = client.status()?;
            println!(
                "workers {workers}; waiting {} ready {} assigned {} running {} finished {} error {}",
                s.waiting, s.ready, s.assigned, s.running, s.finished, s.error
            );
        }
        Cmd::Shutdown => client.shutdown()?,
    }
    Ok(())
}
