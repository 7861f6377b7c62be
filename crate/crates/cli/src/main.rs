use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use asyncagent_core::harness::{self, check_golden, GoldenError};
use asyncagent_core::scenario::Scenario;
use asyncagent_core::trace::{diff_traces, RunOutcome, Trace};

#[derive(Parser)]
#[command(name = "agent", version, about = "Run and inspect agent scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario on the virtual clock.
    Run {
        scenario: PathBuf,
        /// Write the trace (JSON lines) here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Override the request-id seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Rewrite the scenario's golden trace instead of checking it.
        #[arg(long)]
        update_golden: bool,
    },
    /// Compare two traces.
    Diff { a: PathBuf, b: PathBuf },
    /// Run a scenario and print the final root ledger.
    Ledger {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Start the session gateway.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

const USAGE: u8 = 2;
const FAILED: u8 = 1;

fn load(path: &Path, seed: Option<u64>) -> Result<Scenario, ExitCode> {
    let mut scenario = Scenario::load(path).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(USAGE)
    })?;
    if let Some(seed) = seed {
        scenario.config.seed = seed;
    }
    Ok(scenario)
}

fn read_trace(path: &Path) -> Result<Trace, ExitCode> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        eprintln!("error: cannot read {}: {e}", path.display());
        ExitCode::from(USAGE)
    })?;
    Trace::from_jsonl(&text).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        ExitCode::from(USAGE)
    })
}

fn write(path: &Path, text: &str) -> Result<(), ExitCode> {
    std::fs::write(path, text).map_err(|e| {
        eprintln!("error: cannot write {}: {e}", path.display());
        ExitCode::from(USAGE)
    })
}

fn run(scenario: PathBuf, trace_out: Option<PathBuf>, seed: Option<u64>, update: bool) -> Result<(), ExitCode> {
    let scenario = load(&scenario, seed)?;
    let result = harness::run(&scenario).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(USAGE)
    })?;
    let jsonl = result.trace.to_jsonl();
    if let Some(path) = trace_out {
        write(&path, &jsonl)?;
    }
    println!(
        "outcome: {:?}, end_time: {} ms, records: {}",
        result.outcome(),
        result.trace.header.end_time,
        result.trace.records.len()
    );
    let mut ok = result.outcome() != RunOutcome::Timeout;
    if !ok {
        eprintln!("run hit the time limit before settling");
    }
    if !result.runtime.faults().is_empty() {
        ok = false;
        for fault in result.runtime.faults() {
            eprintln!("fault: {fault}");
        }
    }
    if let Some(golden) = scenario.golden_path() {
        if update {
            write(&golden, &jsonl)?;
            println!("golden trace written to {}", golden.display());
        } else {
            match check_golden(&result.trace, &golden) {
                Ok(()) => println!("golden trace matches"),
                Err(GoldenError::Mismatch(diffs)) => {
                    ok = false;
                    for d in diffs {
                        eprintln!("{d}");
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    return Err(ExitCode::from(USAGE));
                }
            }
        }
    }
    if ok {
        Ok(())
    } else {
        Err(ExitCode::from(FAILED))
    }
}

fn diff(a: PathBuf, b: PathBuf) -> Result<(), ExitCode> {
    let (ta, tb) = (read_trace(&a)?, read_trace(&b)?);
    let diffs = diff_traces(&ta, &tb);
    if diffs.is_empty() {
        println!("traces are identical");
        return Ok(());
    }
    for d in diffs {
        println!("{d}");
    }
    Err(ExitCode::from(FAILED))
}

fn ledger(scenario: PathBuf, seed: Option<u64>) -> Result<(), ExitCode> {
    let scenario = load(&scenario, seed)?;
    let result = harness::run(&scenario).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(USAGE)
    })?;
    println!("{}", result.ledger().serialize());
    Ok(())
}

fn serve(port: Option<u16>, config: Option<PathBuf>) -> Result<(), ExitCode> {
    let mut cfg = match config {
        Some(path) => asyncagent_gateway::GatewayConfig::load(&path).map_err(|e| {
            eprintln!("error: {e}");
            ExitCode::from(USAGE)
        })?,
        None => asyncagent_gateway::GatewayConfig::default(),
    };
    if let Some(port) = port {
        cfg.port = port;
    }
    let rt = tokio::runtime::Runtime::new().map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(FAILED)
    })?;
    rt.block_on(async move {
        let addr = std::net::SocketAddr::from(([0, 0, 0, 0], cfg.port));
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| {
            eprintln!("error: cannot bind {addr}: {e}");
            ExitCode::from(FAILED)
        })?;
        println!("listening on ws://{addr}/session");
        asyncagent_gateway::serve(listener, cfg).await.map_err(|e| {
            eprintln!("error: {e}");
            ExitCode::from(FAILED)
        })
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            scenario,
            trace,
            seed,
            update_golden,
        } => run(scenario, trace, seed, update_golden),
        Command::Diff { a, b } => diff(a, b),
        Command::Ledger { scenario, seed } => ledger(scenario, seed),
        Command::Serve { port, config } => serve(port, config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => code,
    }
}
