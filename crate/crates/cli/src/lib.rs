//! Command-line tools, terminal chat and the HTTP session service.

pub mod chat;
pub mod cli;
pub mod server;
