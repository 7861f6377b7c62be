//! Event-driven execution environment for real-time, tool-using agents.

pub mod dispatcher;
pub mod events;
pub mod fsm;
pub mod ledger;
pub mod toolkit;
pub mod peripherals;
pub mod processes;
pub mod harness;
pub mod runtime;
pub mod scenario;
pub mod trace;
