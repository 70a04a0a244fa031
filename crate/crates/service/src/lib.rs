//! Command line and HTTP front ends for the `lcec` calibration library.

pub mod cli;
pub mod provider;
pub mod server;
