//! Network surface of the exchange: the HTTP service, a blocking client for
//! it, and the configuration both share.

pub mod client;
pub mod config;
pub mod server;
pub mod wire;

pub use client::{Client, ClientError};
pub use config::{ClockMode, Config};
