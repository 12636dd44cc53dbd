//! Deterministic simulator and analysis toolkit for consensus on the state
//! derivative over directed networks of delayed multipath channels.

pub mod analysis;
pub mod channel;
pub mod cli;
pub mod digraph;
pub mod linalg;
pub mod protocol;
pub mod simulator;
