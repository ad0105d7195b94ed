//! Command-line front end: single scenario runs and parameter sweeps.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use p2ptv_sim::experiment::write_sweep_csv;
use p2ptv_sim::{run_scenario, run_sweep, ExperimentError, ScenarioConfig, SweepParam, SweepSpec};

#[derive(Debug, Parser)]
#[command(name = "p2ptv", version, about = "Peer-to-peer live TV overlay simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one scenario and write snapshots and traces.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for snapshots.csv and trace_<id>.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of randomly selected nodes to trace.
        #[arg(long)]
        trace: Option<usize>,
        /// Also write events.log.
        #[arg(long)]
        events: bool,
    },
    /// Sweep one parameter over a list of values and write sweep.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// One of peer_R, N, sources, superpeers.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for sweep.csv; defaults to the config's output_dir or
        /// the working directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": { "kind": kind, "message": message } }).to_string()
}

fn execute(command: Command) -> Result<(), ExperimentError> {
    match command {
        Command::Run {
            config,
            seed,
            out,
            trace,
            events,
        } => {
            let mut c = ScenarioConfig::load(&config)?;
            if let Some(seed) = seed {
                c.run.seed = seed;
            }
            if out.is_some() {
                c.run.output_dir = out;
            }
            if let Some(count) = trace {
                c.metrics.trace_count = count;
            }
            c.run.event_trace |= events;
            let run = run_scenario(c)?;
            let config = run.simulation.config();
            match run.summary {
                Some(s) => println!(
                    "seed={} mean_dg={:.6} mean_ug={:.6} epochs={}",
                    config.run.seed, s.mean_dg, s.mean_ug, s.samples
                ),
                None => println!("seed={} no epochs in the steady window", config.run.seed),
            }
            if let Some(dir) = &config.run.output_dir {
                println!("wrote {}", dir.display());
            }
            Ok(())
        }
        Command::Sweep {
            config,
            param,
            values,
            reps,
            seed,
            out,
        } => {
            let mut base = ScenarioConfig::load(&config)?;
            if let Some(seed) = seed {
                base.run.seed = seed;
            }
            let dir = out
                .or_else(|| base.run.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("."));
            let spec = SweepSpec {
                param: param.parse::<SweepParam>()?,
                values,
                replications: reps,
                base,
            };
            let rows = run_sweep(&spec)?;
            std::fs::create_dir_all(&dir).map_err(|source| ExperimentError::Output {
                path: dir.clone(),
                source,
            })?;
            let path = dir.join("sweep.csv");
            write_sweep_csv(&rows, &path)?;
            for row in &rows {
                match &row.outcome {
                    Ok(s) => println!(
                        "{}={} rep={} mean_dg={:.6} mean_ug={:.6}",
                        row.param, row.value, row.replication, s.mean_dg, s.mean_ug
                    ),
                    Err(e) => println!("{}={} rep={} error: {e}", row.param, row.value, row.replication),
                }
            }
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let message = e.to_string();
            eprintln!("{}", error_line("usage", message.lines().next().unwrap_or("")));
            return ExitCode::from(2);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
