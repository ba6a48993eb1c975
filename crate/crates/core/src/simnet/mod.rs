//! Deterministic discrete-event simulator for the protocol.

pub mod msg;
pub mod net;
pub mod trace;
