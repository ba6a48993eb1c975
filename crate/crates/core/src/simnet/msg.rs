//! Message and effect types exchanged between the engine and node logic.
//!
//! Node handlers never touch the clock or the queue directly: they read the
//! current time from their arguments and emit everything they want to happen
//! into an [`Effects`] value, which the engine turns into scheduled events.

use crate::digest::Digest;
use crate::identity::{NodeId, Signature};
use crate::ledger::{
    CertifiedFinal, CertifiedHeader, Complaint, FinalizerBlock, ProposerBlock, Transaction,
};
use std::sync::Arc;

/// Simulated time in integer units; one network tick is [`TICK`] units.
pub type SimTime = u64;

/// Units per network latency tick. All protocol timeouts are multiples of
/// this, and post-stabilization message delays never exceed one tick.
pub const TICK: SimTime = 1000;

/// Convenience: whole ticks to time units.
pub const fn ticks(n: u64) -> SimTime {
    n * TICK
}

/// Everything that travels between nodes. Payloads are reference-counted so
/// a broadcast costs one allocation regardless of fan-out.
#[derive(Debug, Clone)]
pub enum Msg {
    /// Client transaction arriving at a member of the payer's home shard.
    SubmitTx(Arc<Transaction>),
    /// Shard leader's block proposal, sent to all shard members.
    Proposal(Arc<ProposerBlock>),
    /// Shard member's vote on a proposal, sent to the leader.
    Vote(Signature),
    /// Certified shard header, broadcast by the leader to the committee.
    HeaderCert(Arc<CertifiedHeader>),
    /// Leader complaint, broadcast to the committee.
    Complain(Arc<Complaint>),
    /// Committee proposal. `round` and `proposer` are bound by `sig` but are
    /// not part of the block identity, so a later round can re-propose the
    /// same block verbatim and earlier votes still count.
    FcProposal {
        round: u64,
        proposer: NodeId,
        sig: Signature,
        block: Arc<FinalizerBlock>,
        certs: Vec<Arc<CertifiedHeader>>,
    },
    /// Committee member's vote, sent to the round proposer.
    FcVote(Signature),
    /// Certified committee block, broadcast to the committee.
    FcFinal(Arc<CertifiedFinal>),
    /// Cross-shard settlement proof, sent to the destination shard.
    ReceiptMsg(Arc<crate::ledger::Receipt>),
    /// Ask shard members for a finalized block body.
    BlockRequest(Digest),
    BlockResponse(Arc<ProposerBlock>),
}

impl Msg {
    /// Short label for traces and debugging.
    pub fn kind(&self) -> &'static str {
        match self {
            Msg::SubmitTx(_) => "submit",
            Msg::Proposal(_) => "proposal",
            Msg::Vote(_) => "vote",
            Msg::HeaderCert(_) => "header-cert",
            Msg::Complain(_) => "complain",
            Msg::FcProposal { .. } => "fc-proposal",
            Msg::FcVote(_) => "fc-vote",
            Msg::FcFinal(_) => "fc-final",
            Msg::ReceiptMsg(_) => "receipt",
            Msg::BlockRequest(_) => "block-request",
            Msg::BlockResponse(_) => "block-response",
        }
    }
}

/// Node-local timers. Kick timers are periodic pacemakers; timeout timers
/// carry a generation and are invalidated by progress.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimerKind {
    /// Shard pacemaker: leaders (re)propose, members rebroadcast votes.
    PsKick,
    /// Shard liveness watchdog; firing emits a leader complaint.
    PsTimeout,
    /// Committee pacemaker: the round proposer assembles a block.
    FcKick,
    /// Committee round watchdog; firing rotates the proposer.
    FcTimeout,
}

impl TimerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TimerKind::PsKick => "ps-kick",
            TimerKind::PsTimeout => "ps-timeout",
            TimerKind::FcKick => "fc-kick",
            TimerKind::FcTimeout => "fc-timeout",
        }
    }
}

/// Timer request produced by a handler. The engine attributes it to the node
/// whose handler ran. `gen` must match the node's current generation for the
/// kind when the timer fires, otherwise the firing is ignored.
#[derive(Debug, Clone, Copy)]
pub struct TimerReq {
    pub kind: TimerKind,
    pub at: SimTime,
    pub gen: u64,
}

/// Observable protocol events, consumed by the trace writer and the oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoteKind {
    Propose,
    Vote,
    PsQuorum,
    Complain,
    AdoptLeader,
    FinalizeAdopted,
    FcPropose,
    FcVote,
    FcFinal,
    ViewChange,
}

impl NoteKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoteKind::Propose => "PROPOSE",
            NoteKind::Vote => "VOTE",
            NoteKind::PsQuorum => "PS_QUORUM",
            NoteKind::Complain => "COMPLAIN",
            NoteKind::AdoptLeader => "ADOPT_LEADER",
            NoteKind::FinalizeAdopted => "FINALIZE_ADOPTED",
            NoteKind::FcPropose => "FC_PROPOSE",
            NoteKind::FcVote => "FC_VOTE",
            NoteKind::FcFinal => "FC_FINAL",
            NoteKind::ViewChange => "VIEW_CHANGE",
        }
    }
}

/// Extra context for the oracle; the trace uses only kind/node/detail.
#[derive(Debug, Clone)]
pub enum NotePayload {
    None,
    /// Full proposed body (keyed by header hash in `detail`).
    Block(Arc<ProposerBlock>),
    /// Certified committee block at finalization.
    Final(Arc<CertifiedFinal>),
    /// Shard header hashes referenced by a committee proposal.
    Headers(Vec<Digest>),
    /// A complaint as emitted.
    Grievance(Arc<Complaint>),
    /// A leader replacement observed in a finalized committee block.
    Replaced {
        ps: u32,
        view: u64,
        suspect: NodeId,
        new_leader: NodeId,
    },
}

#[derive(Debug, Clone)]
pub struct Note {
    pub kind: NoteKind,
    pub node: NodeId,
    pub detail: Digest,
    pub payload: NotePayload,
}

/// Output sink for node handlers.
#[derive(Debug, Default)]
pub struct Effects {
    pub sends: Vec<(NodeId, Msg)>,
    pub timers: Vec<TimerReq>,
    pub notes: Vec<Note>,
}

impl Effects {
    pub fn new() -> Effects {
        Effects::default()
    }

    pub fn send(&mut self, to: NodeId, msg: Msg) {
        self.sends.push((to, msg));
    }

    /// Send a copy to every listed node (payloads are shared, not cloned).
    pub fn broadcast<'a>(&mut self, to: impl IntoIterator<Item = &'a NodeId>, msg: Msg) {
        for &n in to {
            self.sends.push((n, msg.clone()));
        }
    }

    pub fn timer(&mut self, kind: TimerKind, at: SimTime, gen: u64) {
        self.timers.push(TimerReq { kind, at, gen });
    }

    pub fn note(&mut self, kind: NoteKind, node: NodeId, detail: Digest, payload: NotePayload) {
        self.notes.push(Note {
            kind,
            node,
            detail,
            payload,
        });
    }
}
