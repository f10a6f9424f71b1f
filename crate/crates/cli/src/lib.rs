//! Command-line verbs and the HTTP resampling service.

pub mod commands;
pub mod config;
pub mod server;
pub mod session;
