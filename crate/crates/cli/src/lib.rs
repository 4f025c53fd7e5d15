//! Command implementations behind the `duet` binary.

pub mod bench;
pub mod config;
pub mod eval;
pub mod sample;
pub mod train;
pub mod verify;
