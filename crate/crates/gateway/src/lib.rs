//! WebSocket gateway exposing live agent sessions.
//!
//! Clients connect to `/session` (optionally `?model=<name>`) and exchange
//! JSON frames; see [`frames`] for the wire schema.

pub mod config;
pub mod frames;
pub mod server;
pub mod session;

pub use config::{ConfigError, GatewayConfig};
pub use frames::{ClientFrame, LedgerMirror, ServerFrame};
pub use server::{router, serve};
pub use session::Session;
