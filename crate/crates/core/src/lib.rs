//! Dual-layer sharded consensus: small proposer shards package transactions
//! under majority vote, larger finalizer committees finalize their chains
//! under BFT quorum. This crate holds the protocol library (parameter math,
//! membership, ledger objects, both consensus layers, attack strategies) and
//! a deterministic discrete-event simulator for running scenarios.

pub mod adversary;
pub mod digest;
pub mod fc_consensus;
pub mod identity;
pub mod ledger;
pub mod ps_consensus;
pub mod secparams;
pub mod simnet;

pub use digest::Digest;
pub use identity::{Assignment, EpochRandomness, NodeId};
pub use secparams::EpochParams;
