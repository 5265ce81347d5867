use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use dtask_core::benchgen::{with_sum_payloads, GraphFamily};
use dtask_core::graphfile::{read_graph, write_graph};
use dtask_core::validate_graph;

/// Benchmark graph generator.
#[derive(Parser, Debug)]
#[command(name = "dtask-benchgen", version)]
struct Args {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Print graph statistics as a table row: name, #T, #I, S (KiB), AD (ms), LP.
    Stats {
        #[arg(long)]
        graph: PathBuf,
    },
    /// `<family> [key=value ...] --out <file> [--sum]`; families are
    /// merge (n), merge_slow (n, t), tree (n) and layered (tasks, deps,
    /// levels, dur, dur_jitter, size, size_jitter, seed). Parameters may
    /// also be attached as `merge:n=10000`.
    #[command(external_subcommand)]
    Generate(Vec<String>),
}

/// Arguments of the generate form.
#[derive(Parser, Debug)]
#[command(name = "dtask-benchgen")]
struct GenerateArgs {
    family: String,
    params: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    /// Replace payloads with SUM tasks over constant leaves.
    #[arg(long)]
    sum: bool,
}

impl GenerateArgs {
    fn family(&self) -> anyhow::Result<GraphFamily> {
        let mut spec = self.family.clone();
        // A bare value is shorthand for the size parameter `n`.
        let extra: Vec<String> =
            self.params.iter().map(|p| if p.contains('=') { p.clone() } else { format!("n={p}") }).collect();
        let extra = extra.join(",");
        if !extra.is_empty() {
            spec.push(if spec.contains(':') { ',' } else { ':' });
            spec.push_str(&extra);
        }
        Ok(spec.parse()?)
    }
}

fn main() -> anyhow::Result<()> {
    match Args::parse().command {
        Cmd::Generate(raw) => {
            let args = GenerateArgs::parse_from(std::iter::once("dtask-benchgen".to_owned()).chain(raw));
            let family = args.family()?;
            let mut graph = family.generate()?;
            if args.sum {
                graph = with_sum_payloads(&graph);
            }
            let stats = validate_graph(&graph)?;
            let mut w = BufWriter::new(File::create(&args.out)?);
            write_graph(&graph, &mut w)?;
            w.flush()?;
            println!("{}", stats.table_row(&family.name()));
        }
        Cmd::Stats { graph } => {
            let g = read_graph(BufReader::new(File::open(&graph)?))?;
            let stats = validate_graph(&g)?;
            let name = graph.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            println!("name\t#T\t#I\tS\tAD\tLP");
            println!("{}", stats.table_row(&name));
        }
    }
    Ok(())
}
