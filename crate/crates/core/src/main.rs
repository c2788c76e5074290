use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use simbridge::bridge::{serve_endpoint, NetsimEndpoint};
use simbridge::netsim::{build_network, NetworkConfig, NetworkEngine};
use simbridge::scenario::{
    export_results, load_scenario, run_scenario, RunMode, RunOptions, ScenarioError,
};

#[derive(Parser)]
#[command(name = "simbridge", version, about = "Co-simulated power negotiation runner")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    /// Zero-delay direct message exchange, no network engine.
    Ideal,
    /// Network engine coupled in-process.
    Netsim,
    /// Network engine in a child process over length-prefixed frames.
    NetsimWire,
}

impl From<ModeArg> for RunMode {
    fn from(m: ModeArg) -> RunMode {
        match m {
            ModeArg::Ideal => RunMode::Ideal,
            ModeArg::Netsim => RunMode::NetsimInproc,
            ModeArg::NetsimWire => RunMode::NetsimWire,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Runs a scenario file and writes events.csv, stats.json, states.json.
    Run {
        /// Scenario configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for result files.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the mode from the scenario file.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Overrides the overlay seed from the scenario file.
        #[arg(long)]
        seed: Option<u64>,
        /// Prints the event trace to stdout.
        #[arg(long)]
        trace: bool,
    },
    /// Serves the network engine over stdin/stdout (used internally in wire
    /// mode).
    #[command(hide = true)]
    NetsimServe {
        #[arg(long)]
        network: PathBuf,
    },
}

fn cmd_run(
    config: PathBuf,
    out: PathBuf,
    mode: Option<ModeArg>,
    seed: Option<u64>,
    trace: bool,
) -> Result<(), ScenarioError> {
    let mut cfg = load_scenario(&config)?;
    if let Some(mode) = mode {
        cfg.mode = mode.into();
    }
    if let Some(seed) = seed {
        cfg.overlay.seed = seed;
    }
    let run = run_scenario(&cfg, &RunOptions::default())?;
    export_results(&run, &out)?;
    if trace {
        for event in &run.report.trace {
            println!(
                "{}\t{}\t{}\t{}\t{}",
                event.time.as_micros(),
                event.kind.as_str(),
                event.actor,
                event.msg_id,
                event.detail
            );
        }
    }
    match run.stats.termination_time_us {
        Some(t) => println!("solution found at {t} us"),
        None => println!("no solution within horizon"),
    }
    println!(
        "messages: {} sent, {} delivered, {} lost",
        run.stats.messages_sent, run.stats.messages_delivered, run.stats.messages_lost
    );
    println!("results written to {}", out.display());
    Ok(())
}

fn cmd_netsim_serve(network: PathBuf) -> Result<(), ScenarioError> {
    let text = std::fs::read_to_string(&network)?;
    let config: NetworkConfig = serde_json::from_str(&text)?;
    let topology = build_network(&config).map_err(|e| ScenarioError::Validation {
        field: "network".into(),
        message: e.to_string(),
    })?;
    let endpoint = NetsimEndpoint::new(NetworkEngine::new(topology));
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    serve_endpoint(endpoint, &mut stdin.lock(), &mut stdout.lock()).map_err(|e| {
        ScenarioError::Engine(simbridge::orchestrator::OrchestratorError::Bridge(e))
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Run {
            config,
            out,
            mode,
            seed,
            trace,
        } => cmd_run(config, out, mode, seed, trace),
        Cmd::NetsimServe { network } => cmd_netsim_serve(network),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
