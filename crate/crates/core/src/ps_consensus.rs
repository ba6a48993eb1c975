//! Proposer-shard node logic.
//!
//! Each node runs one of these for the shard it belongs to. Leaders assemble
//! blocks (transactions, cross-shard deposits justified by receipts, an
//! outbox partition) and collect member votes into certified headers, which
//! go to the safeguarding committee for finalization. Members validate and
//! vote, watch the leader with a doubling timeout, complain on stalls or
//! equivocation evidence, and adopt whatever the committee finalizes,
//! including leader replacements.
//!
//! The handlers are pure state transitions: all outputs (messages, timers,
//! trace notes) go through [`Effects`], and time is an input. That keeps the
//! logic independently testable and the simulation deterministic.

use crate::adversary::ProposalMode;
use crate::digest::{Digest, Enc};
use crate::identity::{aggregate, Assignment, EpochRandomness, NodeId, Signature, Signer};
use crate::ledger::{
    apply_block, build_receipt, verify_receipt, Address, CertifiedFinal, CertifiedHeader,
    Complaint, ComplaintReason, ProposerBlock, ProposerHeader, Receipt, ShardState, Transaction,
    ViewChangeRecord, Wallet,
};
use crate::secparams::{quorum_ps, EpochParams};
use crate::simnet::msg::{Effects, Msg, NoteKind, NotePayload, SimTime, TimerKind, TICK};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

/// Tuning knobs; defaults match the standard scenario profile.
#[derive(Debug, Clone, Copy)]
pub struct PsConfig {
    /// How many heights the shard chain may run ahead of finalization.
    /// 1 disables pipelining: a block must finalize before the next one.
    pub pipeline_depth: u64,
    /// Workload transactions per block.
    pub block_capacity: usize,
    /// Receipt batches per block.
    pub receipt_cap: usize,
    /// Pacemaker period.
    pub kick_every: SimTime,
    /// Base leader watchdog; doubles on consecutive firings.
    pub timeout_base: SimTime,
}

impl Default for PsConfig {
    fn default() -> Self {
        PsConfig {
            pipeline_depth: 8,
            block_capacity: 24,
            receipt_cap: 4,
            kick_every: 2 * TICK,
            timeout_base: 4 * TICK,
        }
    }
}

/// A validated (or blindly endorsed) speculative block.
#[derive(Debug, Clone)]
struct Candidate {
    block: Arc<ProposerBlock>,
    /// Post-state; `None` for blind endorsements, which skip validation.
    post: Option<ShardState>,
}

/// Per-shard genesis handles the engine passes in.
#[derive(Debug, Clone)]
pub struct ShardGenesis {
    pub state: ShardState,
    /// Funded account the adversary may spend from (conflicting-block
    /// variants use it so the pair stays individually valid).
    pub adv_liquid: Address,
    /// Empty account for deliberately invalid spends.
    pub adv_empty: Address,
}

pub struct PsNode {
    id: NodeId,
    ps: u32,
    members: Arc<Vec<NodeId>>,
    fc_members: Arc<Vec<NodeId>>,
    shard_count: u32,
    signer: Signer,
    assignment: Arc<Assignment>,
    params: Arc<EpochParams>,
    cfg: PsConfig,

    view: u64,
    leader: NodeId,

    // Finalized chain.
    fin_height: u64,
    fin_tip: Digest,
    fin_state: ShardState,
    /// Latest certified committee block hash, mirrored from the node's
    /// committee role; stamped into proposed headers.
    fc_tip_seen: Digest,

    // Speculative blocks and votes.
    cands: BTreeMap<Digest, Candidate>,
    by_height: BTreeMap<u64, Vec<Digest>>,
    orphans: BTreeMap<Digest, Vec<Arc<ProposerBlock>>>,
    vote_log: BTreeMap<(u64, u64), Digest>,
    votes_recv: BTreeMap<Digest, BTreeMap<NodeId, Signature>>,
    certs: BTreeMap<Digest, Arc<CertifiedHeader>>,
    cert_done: BTreeSet<Digest>,
    seen_headers: BTreeMap<u64, Vec<ProposerHeader>>,
    complained_view: BTreeSet<u64>,

    // Leader chain assembly.
    my_tip: Digest,
    my_tip_height: u64,
    own_next: BTreeMap<Digest, Digest>,
    proposed: BTreeSet<(u64, u64)>,
    last_audience_all: Option<Arc<ProposerBlock>>,
    adv_nonce: u64,

    // Pools and stores.
    mempool: VecDeque<Arc<Transaction>>,
    mempool_ids: BTreeSet<Digest>,
    rpool: BTreeMap<Digest, Arc<Receipt>>,
    store: BTreeMap<Digest, Arc<ProposerBlock>>,
    sent_receipts: BTreeSet<Digest>,

    // Finalized headers waiting for bodies.
    pending_apply: VecDeque<(Digest, Arc<CertifiedFinal>)>,
    requested: BTreeSet<Digest>,
    /// Set if a finalized block failed to apply; the shard state freezes
    /// (the oracle reports the violation independently).
    broken: bool,

    to_gen: u64,
    to_exp: u32,

    mode: ProposalMode,
    blind: bool,
    malicious: Arc<BTreeSet<NodeId>>,
    /// (funded, empty) adversary accounts homed on this shard.
    genesis_handles: (Address, Address),
}

impl PsNode {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: NodeId,
        ps: u32,
        members: Arc<Vec<NodeId>>,
        fc_members: Arc<Vec<NodeId>>,
        assignment: Arc<Assignment>,
        params: Arc<EpochParams>,
        rand: Arc<EpochRandomness>,
        genesis: &ShardGenesis,
        cfg: PsConfig,
    ) -> PsNode {
        let leader = crate::identity::select_leader(&members, 0, &rand, ps);
        let fin_tip = genesis_tip(ps);
        PsNode {
            id,
            ps,
            shard_count: assignment.shard_count(),
            members,
            fc_members,
            signer: Signer::new(id),
            assignment,
            params,
            cfg,
            view: 0,
            leader,
            fin_height: 0,
            fin_tip,
            fin_state: genesis.state.clone(),
            fc_tip_seen: Digest::ZERO,
            cands: BTreeMap::new(),
            by_height: BTreeMap::new(),
            orphans: BTreeMap::new(),
            vote_log: BTreeMap::new(),
            votes_recv: BTreeMap::new(),
            certs: BTreeMap::new(),
            cert_done: BTreeSet::new(),
            seen_headers: BTreeMap::new(),
            complained_view: BTreeSet::new(),
            my_tip: fin_tip,
            my_tip_height: 0,
            own_next: BTreeMap::new(),
            proposed: BTreeSet::new(),
            last_audience_all: None,
            adv_nonce: 0,
            mempool: VecDeque::new(),
            mempool_ids: BTreeSet::new(),
            rpool: BTreeMap::new(),
            store: BTreeMap::new(),
            sent_receipts: BTreeSet::new(),
            pending_apply: VecDeque::new(),
            requested: BTreeSet::new(),
            broken: false,
            to_gen: 0,
            to_exp: 0,
            mode: ProposalMode::Normal,
            blind: false,
            malicious: Arc::new(BTreeSet::new()),
            genesis_handles: (genesis.adv_liquid, genesis.adv_empty),
        }
    }

    pub fn view(&self) -> u64 {
        self.view
    }

    pub fn leader(&self) -> NodeId {
        self.leader
    }

    pub fn fin_height(&self) -> u64 {
        self.fin_height
    }

    pub fn fin_state(&self) -> &ShardState {
        &self.fin_state
    }

    pub fn shard(&self) -> u32 {
        self.ps
    }

    pub fn is_broken(&self) -> bool {
        self.broken
    }

    pub fn set_behavior(&mut self, mode: ProposalMode, blind: bool, malicious: Arc<BTreeSet<NodeId>>) {
        self.mode = mode;
        self.blind = blind;
        self.malicious = malicious;
    }

    /// Mirror of the committee chain tip, for header stamping.
    pub fn set_fc_tip(&mut self, tip: Digest) {
        self.fc_tip_seen = tip;
    }

    /// Arm the pacemaker and watchdog at startup.
    pub fn start(&mut self, now: SimTime, fx: &mut Effects) {
        fx.timer(TimerKind::PsKick, now + self.cfg.kick_every, 0);
        self.to_gen += 1;
        fx.timer(TimerKind::PsTimeout, now + self.cfg.timeout_base, self.to_gen);
        if self.leader == self.id {
            self.maybe_propose(now, fx);
        }
    }

    pub fn on_msg(&mut self, from: NodeId, msg: &Msg, now: SimTime, fx: &mut Effects) {
        match msg {
            Msg::SubmitTx(tx) => self.on_submit(tx),
            Msg::Proposal(block) => self.on_proposal(from, block, now, fx),
            Msg::Vote(sig) => self.on_vote(from, *sig, now, fx),
            Msg::HeaderCert(cert) => self.on_header_cert(cert, now, fx),
            Msg::ReceiptMsg(r) => self.on_receipt(r),
            Msg::BlockRequest(d) => {
                if let Some(body) = self.store.get(d) {
                    fx.send(from, Msg::BlockResponse(body.clone()));
                }
            }
            Msg::BlockResponse(block) => {
                if block.header.ps_id == self.ps {
                    self.store.insert(block.hash(), block.clone());
                    self.drain_pending(now, fx);
                }
            }
            // Complaints are tallied by the committee role, not here.
            _ => {}
        }
    }

    pub fn on_timer(&mut self, kind: TimerKind, gen: u64, now: SimTime, fx: &mut Effects) {
        match kind {
            TimerKind::PsKick => {
                if self.leader == self.id {
                    self.leader_kick(now, fx);
                }
                fx.timer(TimerKind::PsKick, now + self.cfg.kick_every, 0);
            }
            TimerKind::PsTimeout => {
                if gen != self.to_gen {
                    return;
                }
                self.on_watchdog(now, fx);
            }
            _ => {}
        }
    }

    // ------------------------------------------------------------------
    // Ingest
    // ------------------------------------------------------------------

    fn on_submit(&mut self, tx: &Arc<Transaction>) {
        if tx.payer.home_shard(self.shard_count) != self.ps {
            return;
        }
        let id = tx.tx_id();
        if self.mempool_ids.contains(&id) || self.fin_state.included_txs.contains(&id) {
            return;
        }
        self.mempool_ids.insert(id);
        self.mempool.push_back(tx.clone());
    }

    fn on_receipt(&mut self, r: &Arc<Receipt>) {
        if r.dest_ps != self.ps {
            return;
        }
        let bd = r.batch_digest();
        if self.rpool.contains_key(&bd) || self.fin_state.applied_batches.contains(&bd) {
            return;
        }
        if verify_receipt(r, &self.assignment, &self.params).is_ok() {
            self.rpool.insert(bd, r.clone());
        }
    }

    fn on_proposal(&mut self, from: NodeId, block: &Arc<ProposerBlock>, now: SimTime, fx: &mut Effects) {
        let header = &block.header;
        if header.ps_id != self.ps || from != header.leader || !header.signed_by_leader() {
            return;
        }
        let hash = header.hash();
        self.store.entry(hash).or_insert_with(|| block.clone());
        self.note_signed_header(header.clone(), fx);
        if header.height <= self.fin_height || header.leader != self.leader {
            return;
        }
        if header.height > self.fin_height + self.cfg.pipeline_depth {
            return;
        }

        if self.blind && self.malicious.contains(&header.leader) {
            // Colluder: endorse without validation, siblings included.
            self.cands.entry(hash).or_insert_with(|| Candidate {
                block: block.clone(),
                post: None,
            });
            self.by_height.entry(header.height).or_default().push(hash);
            fx.send(header.leader, Msg::Vote(self.signer.sign(hash)));
            fx.note(NoteKind::Vote, self.id, hash, NotePayload::None);
            return;
        }

        if let Some(&voted) = self.vote_log.get(&(self.view, header.height)) {
            if voted != hash {
                return; // one vote per height per view
            }
            // Same digest again: refresh the vote (covers a lost one).
            fx.send(header.leader, Msg::Vote(self.signer.sign(hash)));
            return;
        }

        let parent_state = if header.parent_hash == self.fin_tip {
            if header.height != self.fin_height + 1 {
                return;
            }
            Some(&self.fin_state)
        } else {
            match self.cands.get(&header.parent_hash) {
                Some(c) if c.post.is_some() => {
                    if c.block.header.height + 1 != header.height {
                        return;
                    }
                    c.post.as_ref()
                }
                Some(_) => None,
                None => {
                    // Parent still in flight: park and retry on arrival.
                    self.orphans
                        .entry(header.parent_hash)
                        .or_default()
                        .push(block.clone());
                    return;
                }
            }
        };
        let Some(parent_state) = parent_state else {
            return;
        };

        // Full validation: receipts, then replay.
        for r in &block.receipts {
            if r.dest_ps != self.ps
                || verify_receipt(r, &self.assignment, &self.params).is_err()
            {
                return;
            }
        }
        let mut post = parent_state.clone();
        if apply_block(&mut post, block, self.shard_count).is_err() {
            return;
        }

        self.cands.insert(
            hash,
            Candidate {
                block: block.clone(),
                post: Some(post),
            },
        );
        self.by_height.entry(header.height).or_default().push(hash);
        self.vote_log.insert((self.view, header.height), hash);
        fx.send(header.leader, Msg::Vote(self.signer.sign(hash)));
        fx.note(NoteKind::Vote, self.id, hash, NotePayload::None);

        // A parked child may now be validatable.
        if let Some(children) = self.orphans.remove(&hash) {
            for child in children {
                self.on_proposal(child.header.leader, &child, now, fx);
            }
        }
    }

    fn on_vote(&mut self, from: NodeId, sig: Signature, now: SimTime, fx: &mut Effects) {
        if sig.signer() != from || self.members.binary_search(&from).is_err() {
            return;
        }
        let digest = sig.digest();
        if self.cert_done.contains(&digest) {
            return;
        }
        // Only aggregate votes for blocks this node proposed.
        let Some(body) = self.store.get(&digest) else {
            return;
        };
        if body.header.leader != self.id {
            return;
        }
        let body = body.clone();
        let votes = self.votes_recv.entry(digest).or_default();
        votes.insert(from, sig);
        if (votes.len() as u64) < quorum_ps(self.members.len() as u64) {
            return;
        }
        let sigs: Vec<Signature> = votes.values().copied().collect();
        let agg = aggregate(digest, &sigs, &self.members).expect("members verified");
        let cert = Arc::new(CertifiedHeader {
            header: body.header.clone(),
            votes: agg,
        });
        self.certs.insert(digest, cert.clone());
        self.cert_done.insert(digest);
        fx.broadcast(self.fc_members.iter(), Msg::HeaderCert(cert));
        fx.note(NoteKind::PsQuorum, self.id, digest, NotePayload::None);
        self.progress(now, fx);
        if digest == self.my_tip {
            self.maybe_propose(now, fx);
        }
    }

    fn on_header_cert(&mut self, cert: &Arc<CertifiedHeader>, now: SimTime, fx: &mut Effects) {
        let header = &cert.header;
        if header.ps_id != self.ps {
            return;
        }
        if !header.signed_by_leader() || !cert.quorum_ok(&self.members) {
            return;
        }
        let hash = header.hash();
        self.certs.entry(hash).or_insert_with(|| cert.clone());
        self.note_signed_header(header.clone(), fx);
        if header.leader == self.leader && header.height > self.fin_height {
            // The shard is moving under the current leader.
            self.progress(now, fx);
        }
    }

    /// Track leader-signed headers per height; two distinct ones from the
    /// same signer are equivocation evidence.
    fn note_signed_header(&mut self, header: ProposerHeader, fx: &mut Effects) {
        if header.height <= self.fin_height {
            return;
        }
        let h = header.height;
        let hash = header.hash();
        let entry = self.seen_headers.entry(h).or_default();
        if entry.iter().any(|e| e.hash() == hash) {
            return;
        }
        entry.push(header.clone());
        if self.blind {
            return; // colluders never report their own
        }
        if self.complained_view.contains(&self.view) || header.leader != self.leader {
            return;
        }
        let twin = entry
            .iter()
            .find(|e| e.leader == header.leader && e.hash() != hash)
            .cloned();
        if let Some(twin) = twin {
            let reason =
                ComplaintReason::Equivocation(Box::new(twin), Box::new(header.clone()));
            self.file_complaint(reason, fx);
        }
    }

    fn file_complaint(&mut self, reason: ComplaintReason, fx: &mut Effects) {
        let digest =
            Complaint::body_digest_of(self.ps, self.view, self.leader, &reason, self.id);
        let complaint = Arc::new(Complaint {
            ps_id: self.ps,
            view: self.view,
            suspect: self.leader,
            reason,
            complainer: self.id,
            sig: self.signer.sign(digest),
        });
        self.complained_view.insert(self.view);
        fx.broadcast(self.fc_members.iter(), Msg::Complain(complaint.clone()));
        fx.note(
            NoteKind::Complain,
            self.id,
            digest,
            NotePayload::Grievance(complaint),
        );
    }

    fn on_watchdog(&mut self, now: SimTime, fx: &mut Effects) {
        if !self.blind && self.leader != self.id && !self.complained_view.contains(&self.view) {
            self.file_complaint(ComplaintReason::NoProposal, fx);
        }
        self.to_exp = (self.to_exp + 1).min(16);
        self.to_gen += 1;
        fx.timer(
            TimerKind::PsTimeout,
            now + (self.cfg.timeout_base << self.to_exp),
            self.to_gen,
        );
    }

    /// Any sign of shard progress: reset the watchdog and its backoff.
    fn progress(&mut self, now: SimTime, fx: &mut Effects) {
        self.to_exp = 0;
        self.to_gen += 1;
        fx.timer(TimerKind::PsTimeout, now + self.cfg.timeout_base, self.to_gen);
    }

    // ------------------------------------------------------------------
    // Leading
    // ------------------------------------------------------------------

    fn leader_kick(&mut self, now: SimTime, fx: &mut Effects) {
        if self.mode == ProposalMode::Suppress {
            return;
        }
        // An outstanding uncertified proposal gets rebroadcast; otherwise
        // move the chain (an empty block if the pools are dry, so idle
        // shards still finalize and watchdogs stay quiet).
        if self.my_tip != self.fin_tip && !self.certs.contains_key(&self.my_tip) {
            if let Some(body) = self.store.get(&self.my_tip) {
                let msg = Msg::Proposal(body.clone());
                fx.broadcast(self.members.iter(), msg);
            }
            return;
        }
        if let Some(last) = &self.last_audience_all {
            // A tainted block never certifies; keep showing it.
            if self.mode == ProposalMode::Taint && !self.certs.contains_key(&last.hash()) {
                fx.broadcast(self.members.iter(), Msg::Proposal(last.clone()));
                return;
            }
        }
        self.maybe_propose(now, fx);
    }

    fn maybe_propose(&mut self, _now: SimTime, fx: &mut Effects) {
        if self.leader != self.id || self.broken || self.mode == ProposalMode::Suppress {
            return;
        }
        let height = self.my_tip_height + 1;
        if height > self.fin_height + self.cfg.pipeline_depth {
            return;
        }
        if self.proposed.contains(&(self.view, height)) {
            return;
        }
        let parent_state = if self.my_tip == self.fin_tip {
            self.fin_state.clone()
        } else {
            match self.cands.get(&self.my_tip).and_then(|c| c.post.clone()) {
                Some(s) => s,
                None => return,
            }
        };

        let (receipts, deposits) = self.pick_receipts(&parent_state);
        let locals = self.pick_locals(&parent_state, &deposits);
        let block = self.assemble(height, receipts.clone(), deposits.clone(), locals, 0);
        let hash = block.hash();
        self.proposed.insert((self.view, height));
        self.store.insert(hash, block.clone());

        match self.mode {
            ProposalMode::Normal => {
                self.own_next.insert(self.my_tip, hash);
                self.my_tip = hash;
                self.my_tip_height = height;
                self.last_audience_all = Some(block.clone());
                fx.broadcast(self.members.iter(), Msg::Proposal(block.clone()));
                fx.note(NoteKind::Propose, self.id, hash, NotePayload::Block(block));
            }
            ProposalMode::Equivocate => {
                // Variant B: same content plus one self-transfer from the
                // funded adversary account, so both blocks validate.
                let extra = self.adv_self_tx(true);
                let mut txs_b: Vec<Transaction> = block.txs.clone();
                txs_b.push(extra);
                let block_b = self.assemble_from(height, receipts, txs_b);
                let hash_b = block_b.hash();
                self.store.insert(hash_b, block_b.clone());

                self.own_next.insert(self.my_tip, hash);
                self.my_tip = hash;
                self.my_tip_height = height;

                // Split the honest audience; colluders see both.
                let honest: Vec<NodeId> = self
                    .members
                    .iter()
                    .copied()
                    .filter(|n| !self.malicious.contains(n))
                    .collect();
                let half = honest.len().div_ceil(2);
                for (i, n) in honest.iter().enumerate() {
                    let variant = if i < half { &block } else { &block_b };
                    fx.send(*n, Msg::Proposal(variant.clone()));
                }
                for n in self.members.iter().filter(|n| self.malicious.contains(n)) {
                    fx.send(*n, Msg::Proposal(block.clone()));
                    fx.send(*n, Msg::Proposal(block_b.clone()));
                }
                fx.note(NoteKind::Propose, self.id, hash, NotePayload::Block(block));
                fx.note(
                    NoteKind::Propose,
                    self.id,
                    hash_b,
                    NotePayload::Block(block_b),
                );
            }
            ProposalMode::Taint => {
                // Append one spend from the empty account: individually
                // well-formed, invalid against any state.
                let bad = self.adv_self_tx(false);
                let mut txs: Vec<Transaction> = block.txs.clone();
                txs.push(bad);
                let tainted = self.assemble_from(height, block.receipts.clone(), txs);
                let thash = tainted.hash();
                self.store.insert(thash, tainted.clone());
                self.last_audience_all = Some(tainted.clone());
                // The chain head does not advance: this can never certify.
                fx.broadcast(self.members.iter(), Msg::Proposal(tainted.clone()));
                fx.note(NoteKind::Propose, self.id, thash, NotePayload::Block(tainted));
            }
            _ => unreachable!("suppress handled above"),
        }
    }

    /// Receipts (and their deposit transactions) for the next block.
    fn pick_receipts(&mut self, parent: &ShardState) -> (Vec<Receipt>, Vec<Transaction>) {
        let mut receipts = Vec::new();
        let mut deposits = Vec::new();
        let mut drop_keys = Vec::new();
        for (bd, r) in self.rpool.iter() {
            if parent.applied_batches.contains(bd) {
                drop_keys.push(*bd);
                continue;
            }
            if receipts.len() >= self.cfg.receipt_cap {
                break;
            }
            if r.batch.iter().any(|t| parent.included_txs.contains(&t.tx_id())) {
                drop_keys.push(*bd);
                continue;
            }
            receipts.push((**r).clone());
            deposits.extend(r.batch.iter().cloned());
        }
        for k in drop_keys {
            self.rpool.remove(&k);
        }
        (receipts, deposits)
    }

    /// Local transactions that fit the next block, balance-checked against
    /// the parent state plus this block's own credits and debits.
    fn pick_locals(&mut self, parent: &ShardState, deposits: &[Transaction]) -> Vec<Transaction> {
        let mut credits: BTreeMap<Address, u64> = BTreeMap::new();
        for d in deposits {
            *credits.entry(d.payee).or_insert(0) += d.amount;
        }
        let mut spent: BTreeMap<Address, u64> = BTreeMap::new();
        let mut out = Vec::new();
        let mut rest = VecDeque::new();
        while let Some(tx) = self.mempool.pop_front() {
            if out.len() >= self.cfg.block_capacity {
                rest.push_front(tx);
                break;
            }
            let id = tx.tx_id();
            if parent.included_txs.contains(&id) {
                self.mempool_ids.remove(&id);
                continue;
            }
            let have = parent
                .balance(tx.payer)
                .saturating_add(credits.get(&tx.payer).copied().unwrap_or(0));
            let avail = have.saturating_sub(spent.get(&tx.payer).copied().unwrap_or(0));
            if avail < tx.amount {
                // Unfunded now and unlikely to recover: drop it.
                self.mempool_ids.remove(&id);
                continue;
            }
            *spent.entry(tx.payer).or_insert(0) += tx.amount;
            if tx.payee.home_shard(self.shard_count) == self.ps {
                *credits.entry(tx.payee).or_insert(0) += tx.amount;
            }
            self.mempool_ids.remove(&id);
            out.push((*tx).clone());
        }
        while let Some(tx) = rest.pop_front() {
            self.mempool.push_front(tx);
        }
        out
    }

    fn assemble(
        &mut self,
        height: u64,
        receipts: Vec<Receipt>,
        deposits: Vec<Transaction>,
        locals: Vec<Transaction>,
        _variant: u8,
    ) -> Arc<ProposerBlock> {
        let mut txs = deposits;
        txs.extend(locals);
        self.assemble_from(height, receipts, txs)
    }

    fn assemble_from(
        &mut self,
        height: u64,
        receipts: Vec<Receipt>,
        txs: Vec<Transaction>,
    ) -> Arc<ProposerBlock> {
        let mut outbox: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for (i, tx) in txs.iter().enumerate() {
            if tx.payer.home_shard(self.shard_count) != self.ps {
                continue;
            }
            let dest = tx.payee.home_shard(self.shard_count);
            if dest != self.ps {
                outbox.entry(dest).or_default().push(i as u32);
            }
        }
        let mut block = ProposerBlock {
            header: ProposerHeader {
                ps_id: self.ps,
                height,
                parent_hash: self.my_tip,
                latest_fc_block: self.fc_tip_seen,
                latest_finalized: self.fin_tip,
                tx_root: Digest::ZERO,
                leader: self.id,
                leader_sig: self.signer.sign(Digest::ZERO),
            },
            txs,
            receipts,
            outbox,
        };
        block.header.tx_root = block.computed_tx_root();
        block.header.leader_sig = self.signer.sign(block.header.hash());
        Arc::new(block)
    }

    /// Adversary self-transfer; funded variant validates, empty one cannot.
    fn adv_self_tx(&mut self, funded: bool) -> Transaction {
        let account = if funded {
            self.adv_liquid()
        } else {
            self.adv_empty()
        };
        self.adv_nonce += 1;
        let nonce = (1u64 << 48) | self.adv_nonce;
        let digest = Transaction::body_digest(account, account, 1, nonce);
        Transaction {
            payer: account,
            payee: account,
            amount: 1,
            nonce,
            sig: Wallet::universal().sign(account, digest),
        }
    }

    fn adv_liquid(&self) -> Address {
        self.genesis_handles.0
    }

    fn adv_empty(&self) -> Address {
        self.genesis_handles.1
    }

    // ------------------------------------------------------------------
    // Finalization
    // ------------------------------------------------------------------

    /// The committee finalized these headers (in order) for this shard.
    pub fn adopt_segment(
        &mut self,
        hashes: &[Digest],
        fin: &Arc<CertifiedFinal>,
        now: SimTime,
        fx: &mut Effects,
    ) {
        for h in hashes {
            self.pending_apply.push_back((*h, fin.clone()));
        }
        self.drain_pending(now, fx);
    }

    fn drain_pending(&mut self, now: SimTime, fx: &mut Effects) {
        if self.broken {
            return;
        }
        let mut advanced = false;
        while let Some((hash, fin)) = self.pending_apply.front().cloned() {
            let Some(body) = self.store.get(&hash).cloned() else {
                if self.requested.insert(hash) {
                    let others: Vec<NodeId> = self
                        .members
                        .iter()
                        .copied()
                        .filter(|&n| n != self.id)
                        .collect();
                    fx.broadcast(others.iter(), Msg::BlockRequest(hash));
                }
                break;
            };
            if body.header.height != self.fin_height + 1 {
                // Gap or replay in the finalized stream; freeze.
                self.broken = true;
                break;
            }
            match apply_block(&mut self.fin_state, &body, self.shard_count) {
                Ok(_) => {
                    self.fin_height += 1;
                    self.fin_tip = hash;
                    advanced = true;
                    fx.note(NoteKind::FinalizeAdopted, self.id, hash, NotePayload::None);
                    self.emit_receipts(&body, &fin, fx);
                }
                Err(_) => {
                    self.broken = true;
                    break;
                }
            }
            self.pending_apply.pop_front();
        }
        if advanced {
            self.prune();
            self.progress(now, fx);
            if self.leader == self.id {
                self.maybe_propose(now, fx);
            }
        }
    }

    /// Send settlement proofs for the finalized block's outbox batches.
    fn emit_receipts(&mut self, body: &ProposerBlock, fin: &Arc<CertifiedFinal>, fx: &mut Effects) {
        if body.outbox.is_empty() {
            return;
        }
        let Some(cert) = self.certs.get(&body.hash()) else {
            return;
        };
        for (&dest, _) in body.outbox.iter() {
            let Ok(receipt) = build_receipt(body, cert.votes.clone(), (**fin).clone(), dest)
            else {
                continue;
            };
            let bd = receipt.batch_digest();
            if !self.sent_receipts.insert(bd) {
                continue;
            }
            let receipt = Arc::new(receipt);
            let dest_members = &self.assignment.ps_members[dest as usize];
            fx.broadcast(dest_members.iter(), Msg::ReceiptMsg(receipt));
        }
    }

    /// A finalized leader replacement for this shard.
    pub fn adopt_view_change(&mut self, rec: &ViewChangeRecord, now: SimTime, fx: &mut Effects) {
        if rec.ps_id != self.ps || rec.view < self.view {
            return;
        }
        self.view = rec.view + 1;
        self.leader = rec.new_leader;
        let mut e = Enc::tagged(0x31);
        e.u32(self.ps).u64(self.view).u32(rec.new_leader.0);
        fx.note(
            NoteKind::AdoptLeader,
            self.id,
            Digest::of(&e.finish()),
            NotePayload::None,
        );

        // Drop the deposed leader's unfinalized chain; its transactions go
        // back in the pool for the new leader.
        let stale: Vec<Digest> = self.cands.keys().copied().collect();
        for d in stale {
            self.repool(&d);
        }
        self.cands.clear();
        self.by_height.clear();
        self.orphans.clear();
        self.votes_recv.clear();
        self.cert_done.clear();
        self.certs.retain(|_, c| c.header.height <= self.fin_height);
        self.vote_log.retain(|(v, _), _| *v >= self.view);
        self.proposed.clear();
        self.own_next.clear();
        self.last_audience_all = None;
        self.my_tip = self.fin_tip;
        self.my_tip_height = self.fin_height;

        self.progress(now, fx);
        if self.leader == self.id {
            self.maybe_propose(now, fx);
        }
    }

    /// Drop speculative state at or below the finalized height; recycle the
    /// transactions of losing siblings.
    fn prune(&mut self) {
        let fin = self.fin_height;
        let dead: Vec<Digest> = self
            .by_height
            .range(..=fin)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        for d in dead {
            if d != self.fin_tip {
                self.repool(&d);
            }
            self.cands.remove(&d);
            self.votes_recv.remove(&d);
        }
        self.by_height = self.by_height.split_off(&(fin + 1));
        self.seen_headers = self.seen_headers.split_off(&(fin + 1));
        let keep_from = fin + 1;
        self.vote_log.retain(|(_, h), _| *h >= keep_from);
        // The leader's own chain must still hang off the finalized tip.
        if self.my_tip != self.fin_tip {
            let connected = self.my_tip_height > fin
                && self
                    .cands
                    .get(&self.my_tip)
                    .map(|c| c.block.header.leader == self.id)
                    .unwrap_or(false)
                && self.chain_reaches_fin(self.my_tip);
            if !connected {
                self.my_tip = self.fin_tip;
                self.my_tip_height = fin;
                // Re-propose from the new tip in this view if not yet done.
                self.proposed.retain(|(v, h)| *v != self.view || *h > fin);
            }
        }
    }

    fn chain_reaches_fin(&self, mut d: Digest) -> bool {
        loop {
            if d == self.fin_tip {
                return true;
            }
            match self.cands.get(&d) {
                Some(c) if c.block.header.height > self.fin_height => {
                    d = c.block.header.parent_hash;
                }
                _ => return false,
            }
        }
    }

    /// Recycle a dropped block's local transactions and receipts.
    fn repool(&mut self, digest: &Digest) {
        let Some(c) = self.cands.get(digest) else {
            return;
        };
        let block = c.block.clone();
        for tx in &block.txs {
            if tx.payer.home_shard(self.shard_count) != self.ps {
                continue; // deposits come back through their receipts
            }
            let id = tx.tx_id();
            if self.fin_state.included_txs.contains(&id) || self.mempool_ids.contains(&id) {
                continue;
            }
            self.mempool_ids.insert(id);
            self.mempool.push_back(Arc::new(tx.clone()));
        }
        for r in &block.receipts {
            let bd = r.batch_digest();
            if !self.fin_state.applied_batches.contains(&bd) {
                self.rpool.entry(bd).or_insert_with(|| Arc::new(r.clone()));
            }
        }
    }
}

fn genesis_tip(ps: u32) -> Digest {
    let mut e = Enc::tagged(0x32);
    e.u32(ps);
    Digest::of(&e.finish())
}
