//! Simulation of one-bit Byzantine-tolerant distributed learning: workers
//! vote locally over redundantly allocated data, their sign messages are
//! summed over a fading multiple-access channel, and the server descends
//! along the sign of the received sum.

pub mod bounds;
pub mod channel;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod learn;
pub mod rng;
pub mod server;
pub mod worker;

pub use error::{Error, Result};
