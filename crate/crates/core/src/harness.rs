//! Runs scenarios on the virtual clock and checks them against golden traces.

use std::path::Path;

use crate::ledger::Ledger;
use crate::processes::{Pid, ROOT_PID};
use crate::runtime::Runtime;
use crate::scenario::{Scenario, ScenarioError};
use crate::trace::{diff_traces, Divergence, RunOutcome, Trace, TraceError};

pub struct RunResult {
    pub trace: Trace,
    pub runtime: Runtime,
}

impl RunResult {
    pub fn outcome(&self) -> RunOutcome {
        self.trace.header.outcome
    }

    pub fn ledger(&self) -> &Ledger {
        self.runtime.ledger(ROOT_PID).expect("root exists")
    }

    pub fn ledger_of(&self, pid: Pid) -> Option<&Ledger> {
        self.runtime.ledger(pid)
    }
}

/// Executes `scenario` until quiescence or its time limit.
pub fn run(scenario: &Scenario) -> Result<RunResult, ScenarioError> {
    let mut runtime = scenario.build()?;
    let outcome = runtime.run(scenario.max_virtual_time_ms, scenario.until);
    let trace = Trace::new(outcome, runtime.now(), runtime.records().to_vec());
    Ok(RunResult { trace, runtime })
}

#[derive(Debug, thiserror::Error)]
pub enum GoldenError {
    #[error("cannot read golden trace {path}: {detail}")]
    Read { path: String, detail: String },
    #[error(transparent)]
    Parse(#[from] TraceError),
    #[error("trace differs from golden at line {}", .0[0].line)]
    Mismatch(Vec<Divergence>),
}

/// Compares `trace` with the golden trace stored at `path`.
pub fn check_golden(trace: &Trace, path: &Path) -> Result<(), GoldenError> {
    let text = std::fs::read_to_string(path).map_err(|e| GoldenError::Read {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let golden = Trace::from_jsonl(&text)?;
    let diffs = diff_traces(&golden, trace);
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(GoldenError::Mismatch(diffs))
    }
}
