//! HTTP/WebSocket access to loading sessions and design searches, plus the
//! command-line tools.

pub mod cli;
pub mod protocol;
pub mod server;
