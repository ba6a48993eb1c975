//! Ledger objects: transactions, merkle commitments, proposer and finalizer
//! blocks, cross-shard receipts, complaints, and per-shard account state.
//!
//! Canonical serialization is length-prefixed fields in declaration order
//! (see [`crate::digest`]); block identity is the digest of the header body,
//! and votes sign exactly that digest.

use crate::digest::{Canonical, Digest, Enc};
use crate::identity::{
    aggregate, count_valid, verify, AggregateVotes, Assignment, NodeId, Signature,
};
use crate::secparams::{quorum_fc, quorum_ps, EpochParams};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

pub type Amount = u64;

/// Account address. The owning shard is a digest draw over the address
/// value, uniform across all C·K proposer shards.
#[derive(
    Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize, Default,
)]
pub struct Address(pub u64);

impl Address {
    /// Home proposer shard of this address.
    pub fn home_shard(&self, shard_count: u32) -> u32 {
        let mut e = Enc::tagged(0x20);
        e.u64(self.0);
        let d = Digest::of(&e.finish());
        (u64::from_le_bytes(d.0[..8].try_into().unwrap()) % shard_count as u64) as u32
    }
}

/// Account signature over a transaction digest; mintable only through
/// [`Wallet`], the account-key authority the workload (and, for its own
/// accounts, the adversary) holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccountSig {
    account: Address,
    digest: Digest,
}

impl AccountSig {
    pub fn account(&self) -> Address {
        self.account
    }
}

impl Canonical for AccountSig {
    fn canonical_bytes(&self) -> Vec<u8> {
        let mut e = Enc::tagged(0x21);
        e.u64(self.account.0).digest(&self.digest);
        e.finish()
    }
}

/// Issues account signatures, optionally scoped to a subset of addresses
/// (the adversary only ever holds keys for its own accounts).
#[derive(Debug, Clone, Default)]
pub struct Wallet {
    scope: Option<BTreeSet<Address>>,
}

impl Wallet {
    /// Wallet holding every account key; the workload generator's.
    pub fn universal() -> Wallet {
        Wallet { scope: None }
    }

    /// Wallet restricted to the given accounts.
    pub fn scoped(accounts: BTreeSet<Address>) -> Wallet {
        Wallet {
            scope: Some(accounts),
        }
    }

    pub fn sign(&self, account: Address, digest: Digest) -> AccountSig {
        if let Some(scope) = &self.scope {
            assert!(scope.contains(&account), "wallet has no key for account");
        }
        AccountSig { account, digest }
    }
}

/// A value transfer. `nonce` uniquifies otherwise-identical transfers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transaction {
    pub payer: Address,
    pub payee: Address,
    pub amount: Amount,
    pub nonce: u64,
    pub sig: AccountSig,
}

impl Transaction {
    /// Digest of the transfer body (what the payer signs).
    pub fn body_digest(payer: Address, payee: Address, amount: Amount, nonce: u64) -> Digest {
        let mut e = Enc::tagged(0x22);
        e.u64(payer.0).u64(payee.0).u64(amount).u64(nonce);
        Digest::of(&e.finish())
    }

    pub fn tx_id(&self) -> Digest {
        Self::body_digest(self.payer, self.payee, self.amount, self.nonce)
    }

    /// True when payer and payee live on different shards.
    pub fn is_cross_shard(&self, shard_count: u32) -> bool {
        self.payer.home_shard(shard_count) != self.payee.home_shard(shard_count)
    }
}

impl Canonical for Transaction {
    fn canonical_bytes(&self) -> Vec<u8> {
        let mut e = Enc::tagged(0x23);
        e.u64(self.payer.0).u64(self.payee.0).u64(self.amount).u64(self.nonce);
        e.bytes(&self.sig.canonical_bytes());
        e.finish()
    }
}

#[derive(Debug, Error, PartialEq, Eq, Clone, Copy)]
pub enum TxError {
    #[error("signature does not match payer and body")]
    BadSignature,
    #[error("transaction does not belong to this shard")]
    WrongShard,
    #[error("payer balance below amount")]
    InsufficientBalance,
}

// ---------------------------------------------------------------------------
// Merkle commitments
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MerkleError {
    #[error("leaf index {index} out of range for {leaves} leaves")]
    IndexOutOfRange { index: u32, leaves: u32 },
}

/// Inclusion proof: sibling digests from leaf to root plus the leaf index,
/// whose bits pick the side at each level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MerkleProof {
    pub index: u32,
    pub path: Vec<Digest>,
}

impl Canonical for MerkleProof {
    fn canonical_bytes(&self) -> Vec<u8> {
        let mut e = Enc::tagged(0x24);
        e.u32(self.index).u32(self.path.len() as u32);
        for d in &self.path {
            e.digest(d);
        }
        e.finish()
    }
}

/// Merkle root over leaf digests. Odd levels duplicate their last node;
/// an empty leaf set commits to the zero sentinel.
pub fn merkle_root(leaves: &[Digest]) -> Digest {
    if leaves.is_empty() {
        return Digest::ZERO;
    }
    let mut level = leaves.to_vec();
    while level.len() > 1 {
        if level.len() % 2 == 1 {
            level.push(*level.last().unwrap());
        }
        level = level
            .chunks(2)
            .map(|pair| Digest::pair(&pair[0], &pair[1]))
            .collect();
    }
    level[0]
}

/// Inclusion proof for `index` within `leaves`.
pub fn merkle_prove(leaves: &[Digest], index: u32) -> Result<MerkleProof, MerkleError> {
    if index as usize >= leaves.len() {
        return Err(MerkleError::IndexOutOfRange {
            index,
            leaves: leaves.len() as u32,
        });
    }
    let mut path = Vec::new();
    let mut level = leaves.to_vec();
    let mut pos = index as usize;
    while level.len() > 1 {
        if level.len() % 2 == 1 {
            level.push(*level.last().unwrap());
        }
        path.push(level[pos ^ 1]);
        level = level
            .chunks(2)
            .map(|pair| Digest::pair(&pair[0], &pair[1]))
            .collect();
        pos /= 2;
    }
    Ok(MerkleProof { index, path })
}

/// Recompute the root from a leaf and its proof.
pub fn merkle_verify(root: Digest, leaf: Digest, proof: &MerkleProof) -> bool {
    let mut acc = leaf;
    let mut pos = proof.index;
    for sibling in &proof.path {
        acc = if pos & 1 == 0 {
            Digest::pair(&acc, sibling)
        } else {
            Digest::pair(sibling, &acc)
        };
        pos /= 2;
    }
    acc == root
}

// ---------------------------------------------------------------------------
// Proposer blocks
// ---------------------------------------------------------------------------

/// Proposer block header. Identity is `hash()`, the digest of the body
/// fields; the leader signature and member votes both sign that digest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProposerHeader {
    pub ps_id: u32,
    pub height: u64,
    pub parent_hash: Digest,
    /// Latest finalizer block of the safeguarding committee known to the
    /// proposing leader.
    pub latest_fc_block: Digest,
    /// Latest finalized block of this shard known to the proposing leader.
    pub latest_finalized: Digest,
    /// Merkle root over the block's transactions plus one batch-commitment
    /// leaf per cross-shard destination.
    pub tx_root: Digest,
    pub leader: NodeId,
    pub leader_sig: Signature,
}

impl ProposerHeader {
    pub fn body_digest_of(
        ps_id: u32,
        height: u64,
        parent_hash: Digest,
        latest_fc_block: Digest,
        latest_finalized: Digest,
        tx_root: Digest,
        leader: NodeId,
    ) -> Digest {
        let mut e = Enc::tagged(0x25);
        e.u32(ps_id)
            .u64(height)
            .digest(&parent_hash)
            .digest(&latest_fc_block)
            .digest(&latest_finalized)
            .digest(&tx_root)
            .u32(leader.0);
        Digest::of(&e.finish())
    }

    /// Block identity: digest of the header body (signature excluded).
    pub fn hash(&self) -> Digest {
        Self::body_digest_of(
            self.ps_id,
            self.height,
            self.parent_hash,
            self.latest_fc_block,
            self.latest_finalized,
            self.tx_root,
            self.leader,
        )
    }

    /// Leader signature over the body digest.
    pub fn signed_by_leader(&self) -> bool {
        verify(&self.leader_sig, self.leader, self.hash())
    }
}

impl Canonical for ProposerHeader {
    fn canonical_bytes(&self) -> Vec<u8> {
        let mut e = Enc::tagged(0x26);
        e.u32(self.ps_id)
            .u64(self.height)
            .digest(&self.parent_hash)
            .digest(&self.latest_fc_block)
            .digest(&self.latest_finalized)
            .digest(&self.tx_root)
            .u32(self.leader.0);
        e.bytes(&self.leader_sig.canonical_bytes());
        e.finish()
    }
}

/// Header plus the aggregated member votes that certify shard consensus;
/// this is what travels to the finalizer layer and into receipts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CertifiedHeader {
    pub header: ProposerHeader,
    pub votes: AggregateVotes,
}

impl CertifiedHeader {
    /// Votes reach the shard quorum and sign this header's digest.
    pub fn quorum_ok(&self, members: &[NodeId]) -> bool {
        self.votes.digest() == self.header.hash()
            && count_valid(&self.votes, members) >= quorum_ps(members.len() as u64)
    }
}

impl Canonical for CertifiedHeader {
    fn canonical_bytes(&self) -> Vec<u8> {
        let mut e = Enc::tagged(0x27);
        e.bytes(&self.header.canonical_bytes());
        e.bytes(&self.votes.canonical_bytes());
        e.finish()
    }
}

/// Full proposer block: header, transactions, deposit receipts justifying
/// foreign-payer transactions, and the outbox partition of cross-shard
/// transactions by destination shard (indices into `txs`).
///
/// The tx root binds `txs` and the outbox batch commitments; the embedded
/// receipts are witness data checked by voters but outside the digest (any
/// valid witness set justifies the same deposits).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProposerBlock {
    pub header: ProposerHeader,
    pub txs: Vec<Transaction>,
    pub receipts: Vec<Receipt>,
    pub outbox: BTreeMap<u32, Vec<u32>>,
}

/// Commitment leaf for one outbox batch: destination plus the tx ids, in
/// block order.
pub fn batch_commitment(dest_ps: u32, txs: &[&Transaction]) -> Digest {
    let mut e = Enc::tagged(0x28);
    e.u32(dest_ps).u32(txs.len() as u32);
    for tx in txs {
        e.digest(&tx.tx_id());
    }
    Digest::of(&e.finish())
}

impl ProposerBlock {
    /// Leaf digests: each transaction, then one batch commitment per
    /// destination in ascending destination order.
    pub fn leaves(&self) -> Vec<Digest> {
        let mut leaves: Vec<Digest> =
            self.txs.iter().map(|tx| tx.content_digest()).collect();
        for (dest, idxs) in &self.outbox {
            let batch: Vec<&Transaction> =
                idxs.iter().map(|&i| &self.txs[i as usize]).collect();
            leaves.push(batch_commitment(*dest, &batch));
        }
        leaves
    }

    /// Recomputed merkle root over the leaves.
    pub fn computed_tx_root(&self) -> Digest {
        merkle_root(&self.leaves())
    }

    pub fn hash(&self) -> Digest {
        self.header.hash()
    }
}

// ---------------------------------------------------------------------------
// Complaints and view changes
// ---------------------------------------------------------------------------

/// Grounds for replacing a shard leader.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ComplaintReason {
    /// The leader produced nothing within the complainer's timeout.
    NoProposal,
    /// Two leader-signed headers at the same height with distinct hashes.
    Equivocation(Box<ProposerHeader>, Box<ProposerHeader>),
}

impl ComplaintReason {
    pub fn kind(&self) -> &'static str {
        match self {
            ComplaintReason::NoProposal => "no-proposal",
            ComplaintReason::Equivocation(..) => "equivocation",
        }
    }
}

/// A signed leader complaint, sent to the complainer's shard and committee.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Complaint {
    pub ps_id: u32,
    pub view: u64,
    pub suspect: NodeId,
    pub reason: ComplaintReason,
    pub complainer: NodeId,
    pub sig: Signature,
}

impl Complaint {
    pub fn body_digest_of(
        ps_id: u32,
        view: u64,
        suspect: NodeId,
        reason: &ComplaintReason,
        complainer: NodeId,
    ) -> Digest {
        let mut e = Enc::tagged(0x29);
        e.u32(ps_id).u64(view).u32(suspect.0).u32(complainer.0);
        match reason {
            ComplaintReason::NoProposal => {
                e.u8(0);
            }
            ComplaintReason::Equivocation(a, b) => {
                e.u8(1);
                e.bytes(&a.canonical_bytes());
                e.bytes(&b.canonical_bytes());
            }
        }
        Digest::of(&e.finish())
    }

    pub fn digest(&self) -> Digest {
        Self::body_digest_of(self.ps_id, self.view, self.suspect, &self.reason, self.complainer)
    }

    /// Signature and, for equivocation, the embedded evidence pair.
    pub fn verify(&self, ps_members: &[NodeId]) -> bool {
        if ps_members.binary_search(&self.complainer).is_err() {
            return false;
        }
        if !verify(&self.sig, self.complainer, self.digest()) {
            return false;
        }
        match &self.reason {
            ComplaintReason::NoProposal => true,
            ComplaintReason::Equivocation(a, b) => {
                a.ps_id == self.ps_id
                    && b.ps_id == self.ps_id
                    && a.leader == self.suspect
                    && b.leader == self.suspect
                    && a.height == b.height
                    && a.hash() != b.hash()
                    && a.signed_by_leader()
                    && b.signed_by_leader()
            }
        }
    }
}

impl Canonical for Complaint {
    fn canonical_bytes(&self) -> Vec<u8> {
        let mut e = Enc::tagged(0x2a);
        e.u32(self.ps_id).u64(self.view).u32(self.suspect.0).u32(self.complainer.0);
        match &self.reason {
            ComplaintReason::NoProposal => {
                e.u8(0);
            }
            ComplaintReason::Equivocation(a, b) => {
                e.u8(1);
                e.bytes(&a.canonical_bytes());
                e.bytes(&b.canonical_bytes());
            }
        }
        e.bytes(&self.sig.canonical_bytes());
        e.finish()
    }
}

/// Leader replacement carried by a finalizer block: the shard, the view
/// being closed, the replacement leader, and the complaint evidence that
/// justifies it (quorum of distinct shard members).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewChangeRecord {
    pub ps_id: u32,
    pub view: u64,
    pub new_leader: NodeId,
    pub complaints: Vec<Complaint>,
}

impl Canonical for ViewChangeRecord {
    fn canonical_bytes(&self) -> Vec<u8> {
        let mut e = Enc::tagged(0x2b);
        e.u32(self.ps_id).u64(self.view).u32(self.new_leader.0);
        e.list(&self.complaints);
        e.finish()
    }
}

// ---------------------------------------------------------------------------
// Finalizer blocks
// ---------------------------------------------------------------------------

/// Finalizer block body: per-shard segments of proposer header hashes to
/// finalize (parent-linked, ascending height) plus any view changes.
///
/// The committee round and proposer are deliberately *not* part of the
/// block: they ride on the proposal message and are bound by the proposer's
/// composite signature there. Identity depending only on content lets a
/// later round re-propose the same block verbatim, so votes a member
/// already cast keep counting and a height can never certify two ways.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FinalizerBlock {
    pub fc_id: u32,
    pub height: u64,
    pub parent_hash: Digest,
    /// ps id → ordered proposer header hashes.
    pub finalized: BTreeMap<u32, Vec<Digest>>,
    pub view_changes: Vec<ViewChangeRecord>,
}

impl FinalizerBlock {
    pub fn body_digest_of(
        fc_id: u32,
        height: u64,
        parent_hash: Digest,
        finalized: &BTreeMap<u32, Vec<Digest>>,
        view_changes: &[ViewChangeRecord],
    ) -> Digest {
        let mut e = Enc::tagged(0x2c);
        e.u32(fc_id).u64(height).digest(&parent_hash);
        e.u32(finalized.len() as u32);
        for (ps, hashes) in finalized {
            e.u32(*ps).u32(hashes.len() as u32);
            for h in hashes {
                e.digest(h);
            }
        }
        e.list(view_changes);
        Digest::of(&e.finish())
    }

    pub fn hash(&self) -> Digest {
        Self::body_digest_of(
            self.fc_id,
            self.height,
            self.parent_hash,
            &self.finalized,
            &self.view_changes,
        )
    }

    /// Digest a round proposer signs when offering this block in `round`:
    /// binds the block, the round, and the proposer identity together.
    pub fn proposal_digest(&self, round: u64, proposer: NodeId) -> Digest {
        let mut e = Enc::tagged(0x33);
        e.digest(&self.hash()).u64(round).u32(proposer.0);
        Digest::of(&e.finish())
    }

    /// Total proposer headers this block finalizes.
    pub fn header_count(&self) -> usize {
        self.finalized.values().map(Vec::len).sum()
    }

    /// True if the segment for `ps` contains `hash`.
    pub fn finalizes(&self, ps: u32, hash: Digest) -> bool {
        self.finalized.get(&ps).is_some_and(|seg| seg.contains(&hash))
    }
}

impl Canonical for FinalizerBlock {
    fn canonical_bytes(&self) -> Vec<u8> {
        let mut e = Enc::tagged(0x2d);
        e.u32(self.fc_id).u64(self.height).digest(&self.parent_hash);
        e.u32(self.finalized.len() as u32);
        for (ps, hashes) in &self.finalized {
            e.u32(*ps).u32(hashes.len() as u32);
            for h in hashes {
                e.digest(h);
            }
        }
        e.list(&self.view_changes);
        e.finish()
    }
}

/// Finalizer block plus the committee quorum that finalized it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CertifiedFinal {
    pub block: FinalizerBlock,
    pub votes: AggregateVotes,
}

impl CertifiedFinal {
    pub fn quorum_ok(&self, fc_members: &[NodeId]) -> bool {
        self.votes.digest() == self.block.hash()
            && count_valid(&self.votes, fc_members) >= quorum_fc(fc_members.len() as u64)
    }
}

impl Canonical for CertifiedFinal {
    fn canonical_bytes(&self) -> Vec<u8> {
        let mut e = Enc::tagged(0x2e);
        e.bytes(&self.block.canonical_bytes());
        e.bytes(&self.votes.canonical_bytes());
        e.finish()
    }
}

// ---------------------------------------------------------------------------
// Receipts
// ---------------------------------------------------------------------------

/// Proof that a batch of cross-shard transactions was finalized on its
/// source shard: the batch itself, a merkle proof binding it to the source
/// header's tx root, the certified source header, and the certified
/// finalizer block that finalized it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Receipt {
    pub source_ps: u32,
    pub dest_ps: u32,
    pub batch: Vec<Transaction>,
    pub proof: MerkleProof,
    pub header: CertifiedHeader,
    pub fin: CertifiedFinal,
}

impl Receipt {
    /// The committed batch leaf; also the replay-protection key.
    pub fn batch_digest(&self) -> Digest {
        let refs: Vec<&Transaction> = self.batch.iter().collect();
        batch_commitment(self.dest_ps, &refs)
    }

    pub fn total_amount(&self) -> Amount {
        self.batch.iter().map(|t| t.amount).sum()
    }
}

impl Canonical for Receipt {
    fn canonical_bytes(&self) -> Vec<u8> {
        let mut e = Enc::tagged(0x2f);
        e.u32(self.source_ps).u32(self.dest_ps);
        e.list(&self.batch);
        e.bytes(&self.proof.canonical_bytes());
        e.bytes(&self.header.canonical_bytes());
        e.bytes(&self.fin.canonical_bytes());
        e.finish()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReceiptError {
    #[error("source block is not finalized by the attached finalizer block")]
    NotFinalized,
    #[error("block has no outbox batch for destination {0}")]
    NoSuchBatch(u32),
    #[error("merkle proof does not bind the batch to the source tx root")]
    BadProof,
    #[error("source header certification invalid")]
    BadHeaderCert,
    #[error("finalizer certification invalid")]
    BadFinalCert,
    #[error("batch content malformed")]
    BadBatch,
}

/// Build the receipt for `dest` from a finalized source block. The caller
/// supplies the vote aggregate it holds for the header and the certified
/// finalizer block that finalized it.
pub fn build_receipt(
    block: &ProposerBlock,
    votes: AggregateVotes,
    fin: CertifiedFinal,
    dest: u32,
) -> Result<Receipt, ReceiptError> {
    if !fin.block.finalizes(block.header.ps_id, block.hash()) {
        return Err(ReceiptError::NotFinalized);
    }
    let idxs = block
        .outbox
        .get(&dest)
        .ok_or(ReceiptError::NoSuchBatch(dest))?;
    let leaves = block.leaves();
    // Batch leaves follow the txs, in ascending destination order.
    let slot = block.outbox.keys().position(|&d| d == dest).unwrap();
    let leaf_index = (block.txs.len() + slot) as u32;
    let proof = merkle_prove(&leaves, leaf_index).expect("leaf index in range");
    Ok(Receipt {
        source_ps: block.header.ps_id,
        dest_ps: dest,
        batch: idxs.iter().map(|&i| block.txs[i as usize].clone()).collect(),
        proof,
        header: CertifiedHeader {
            header: block.header.clone(),
            votes,
        },
        fin,
    })
}

/// Full receipt verification against the epoch assignment: source header
/// certified by its shard, finalizer block certified by the safeguarding
/// committee and finalizing that header, merkle proof binding the batch to
/// the header's tx root, and every batch tx paying into `dest_ps`.
pub fn verify_receipt(
    r: &Receipt,
    assignment: &Assignment,
    params: &EpochParams,
) -> Result<(), ReceiptError> {
    let shard_count = assignment.shard_count();
    if r.source_ps >= shard_count || r.dest_ps >= shard_count || r.source_ps == r.dest_ps {
        return Err(ReceiptError::BadBatch);
    }
    if r.batch.is_empty() {
        return Err(ReceiptError::BadBatch);
    }
    let src_members = &assignment.ps_members[r.source_ps as usize];
    if r.header.header.ps_id != r.source_ps
        || !r.header.header.signed_by_leader()
        || !r.header.quorum_ok(src_members)
    {
        return Err(ReceiptError::BadHeaderCert);
    }
    let fc = assignment.fc_of_ps(r.source_ps);
    let fc_members = &assignment.fc_members[fc as usize];
    if r.fin.block.fc_id != fc || !r.fin.quorum_ok(fc_members) {
        return Err(ReceiptError::BadFinalCert);
    }
    if !r.fin.block.finalizes(r.source_ps, r.header.header.hash()) {
        return Err(ReceiptError::NotFinalized);
    }
    if !merkle_verify(r.header.header.tx_root, r.batch_digest(), &r.proof) {
        return Err(ReceiptError::BadProof);
    }
    for tx in &r.batch {
        if tx.payee.home_shard(shard_count) != r.dest_ps {
            return Err(ReceiptError::BadBatch);
        }
    }
    let _ = params; // shard/committee shapes come from the assignment
    Ok(())
}

// ---------------------------------------------------------------------------
// Shard state
// ---------------------------------------------------------------------------

/// Account state of one shard at one block: balances, the set of credited
/// batch digests (deposit replay protection), and the set of included tx
/// ids (intra-chain dedupe). Cloned per speculative block; runs are desk
/// scale so snapshots stay cheap.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ShardState {
    pub balances: BTreeMap<Address, Amount>,
    pub applied_batches: BTreeSet<Digest>,
    pub included_txs: BTreeSet<Digest>,
}

impl ShardState {
    pub fn balance(&self, a: Address) -> Amount {
        self.balances.get(&a).copied().unwrap_or(0)
    }

    pub fn credit(&mut self, a: Address, amount: Amount) {
        *self.balances.entry(a).or_insert(0) += amount;
    }
}

/// Validate one transaction against a shard state. Deposits (foreign payer,
/// local payee, justified by a verified receipt batch) skip the balance
/// check: the debit already happened on the source shard.
pub fn validate_tx(
    state: &ShardState,
    tx: &Transaction,
    ps: u32,
    shard_count: u32,
    is_deposit: bool,
) -> Result<(), TxError> {
    if tx.sig.account != tx.payer || tx.sig.digest != tx.tx_id() {
        return Err(TxError::BadSignature);
    }
    if is_deposit {
        if tx.payee.home_shard(shard_count) != ps {
            return Err(TxError::WrongShard);
        }
    } else {
        if tx.payer.home_shard(shard_count) != ps {
            return Err(TxError::WrongShard);
        }
        if state.balance(tx.payer) < tx.amount {
            return Err(TxError::InsufficientBalance);
        }
    }
    Ok(())
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ApplyError {
    #[error("invalid block: {0}")]
    InvalidBlock(&'static str),
    #[error("invalid block: {0:?}")]
    InvalidTx(TxError),
}

/// Effects of applying a block, for receipt building and global accounting.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BlockEffects {
    /// dest shard → total amount leaving through the outbox.
    pub outbound: BTreeMap<u32, Amount>,
    /// Batch digests credited by this block's deposits.
    pub credited_batches: Vec<Digest>,
}

/// Apply a proposer block to the shard state it extends. Validates
/// everything a voter validates (minus the receipt certifications, checked
/// at vote time): tx root, outbox partition, per-tx validity, dedupe, and
/// deposit coverage by the embedded receipt batches.
pub fn apply_block(
    state: &mut ShardState,
    block: &ProposerBlock,
    shard_count: u32,
) -> Result<BlockEffects, ApplyError> {
    let ps = block.header.ps_id;
    if block.header.tx_root != block.computed_tx_root() {
        return Err(ApplyError::InvalidBlock("tx root mismatch"));
    }
    // Deposit coverage: every foreign-payer tx must appear in exactly one
    // embedded receipt batch aimed at this shard, and every batch tx must be
    // in the block (else a batch would be marked applied without crediting).
    let mut deposit_ids: BTreeSet<Digest> = BTreeSet::new();
    let tx_ids: BTreeSet<Digest> = block.txs.iter().map(|t| t.tx_id()).collect();
    for r in &block.receipts {
        if r.dest_ps != ps {
            return Err(ApplyError::InvalidBlock("receipt for another shard"));
        }
        let bd = r.batch_digest();
        if state.applied_batches.contains(&bd) {
            return Err(ApplyError::InvalidBlock("batch already credited"));
        }
        for tx in &r.batch {
            if !tx_ids.contains(&tx.tx_id()) {
                return Err(ApplyError::InvalidBlock("receipt batch tx not in block"));
            }
            deposit_ids.insert(tx.tx_id());
        }
    }
    // Outbox partition must exactly cover the cross-shard txs.
    let mut expected_outbox: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for (i, tx) in block.txs.iter().enumerate() {
        let home = tx.payer.home_shard(shard_count);
        if home == ps {
            let dest = tx.payee.home_shard(shard_count);
            if dest != ps {
                expected_outbox.entry(dest).or_default().push(i as u32);
            }
        }
    }
    if expected_outbox != block.outbox {
        return Err(ApplyError::InvalidBlock("outbox partition mismatch"));
    }

    let mut effects = BlockEffects::default();
    for tx in &block.txs {
        let id = tx.tx_id();
        if state.included_txs.contains(&id) {
            return Err(ApplyError::InvalidBlock("tx replayed on this chain"));
        }
        let is_deposit = tx.payer.home_shard(shard_count) != ps;
        if is_deposit && !deposit_ids.contains(&id) {
            return Err(ApplyError::InvalidBlock("deposit without receipt"));
        }
        validate_tx(state, tx, ps, shard_count, is_deposit).map_err(ApplyError::InvalidTx)?;
        if is_deposit {
            state.credit(tx.payee, tx.amount);
        } else {
            let bal = state.balances.get_mut(&tx.payer).unwrap();
            *bal -= tx.amount;
            let dest = tx.payee.home_shard(shard_count);
            if dest == ps {
                state.credit(tx.payee, tx.amount);
            } else {
                *effects.outbound.entry(dest).or_insert(0) += tx.amount;
            }
        }
        state.included_txs.insert(id);
    }
    for r in &block.receipts {
        let bd = r.batch_digest();
        state.applied_batches.insert(bd);
        effects.credited_batches.push(bd);
    }
    Ok(effects)
}

/// Aggregate helper used by voters when they first cross the vote quorum:
/// wrap the header and the vote signatures they hold.
pub fn certify_header(
    header: &ProposerHeader,
    sigs: &[Signature],
    members: &[NodeId],
) -> Result<CertifiedHeader, crate::identity::VoteError> {
    Ok(CertifiedHeader {
        header: header.clone(),
        votes: aggregate(header.hash(), sigs, members)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::{EpochRandomness, Signer};
    use crate::secparams::DEFAULT_EPSILON;

    fn wallet_tx(payer: Address, payee: Address, amount: Amount, nonce: u64) -> Transaction {
        let w = Wallet::universal();
        let sig = w.sign(payer, Transaction::body_digest(payer, payee, amount, nonce));
        Transaction {
            payer,
            payee,
            amount,
            nonce,
            sig,
        }
    }

    /// First few addresses whose home is the given shard of 4.
    fn addrs_on(ps: u32, count: usize) -> Vec<Address> {
        (0u64..)
            .map(Address)
            .filter(|a| a.home_shard(4) == ps)
            .take(count)
            .collect()
    }

    #[test]
    fn home_shard_uniform_enough() {
        let mut counts = [0usize; 4];
        for v in 0..4000u64 {
            counts[Address(v).home_shard(4) as usize] += 1;
        }
        for c in counts {
            assert!((800..1200).contains(&c), "skew: {counts:?}");
        }
    }

    #[test]
    fn merkle_roundtrip_all_sizes() {
        for n in 1..=9usize {
            let leaves: Vec<Digest> =
                (0..n).map(|i| Digest::of(&[i as u8])).collect();
            let root = merkle_root(&leaves);
            for i in 0..n as u32 {
                let proof = merkle_prove(&leaves, i).unwrap();
                assert!(merkle_verify(root, leaves[i as usize], &proof));
                // Tampered leaf fails.
                assert!(!merkle_verify(root, Digest::of(b"x"), &proof));
            }
        }
    }

    #[test]
    fn merkle_empty_and_out_of_range() {
        assert_eq!(merkle_root(&[]), Digest::ZERO);
        assert_eq!(
            merkle_prove(&[Digest::ZERO], 1).unwrap_err(),
            MerkleError::IndexOutOfRange { index: 1, leaves: 1 }
        );
    }

    #[test]
    fn merkle_duplicate_last_padding_is_positional() {
        // Root over [a, b, c] must differ from [a, b] and from [a, c, b].
        let a = Digest::of(b"a");
        let b = Digest::of(b"b");
        let c = Digest::of(b"c");
        let r3 = merkle_root(&[a, b, c]);
        assert_ne!(r3, merkle_root(&[a, b]));
        assert_ne!(r3, merkle_root(&[a, c, b]));
    }

    #[test]
    fn validate_tx_error_cases() {
        let shard_count = 4;
        let accounts = addrs_on(1, 3);
        let mut state = ShardState::default();
        state.credit(accounts[0], 10);

        let good = wallet_tx(accounts[0], accounts[1], 5, 0);
        assert!(validate_tx(&state, &good, 1, shard_count, false).is_ok());

        // Signature issued for a different body.
        let mut forged = good.clone();
        forged.amount = 6;
        assert_eq!(
            validate_tx(&state, &forged, 1, shard_count, false),
            Err(TxError::BadSignature)
        );

        // Wrong shard.
        assert_eq!(
            validate_tx(&state, &good, 2, shard_count, false),
            Err(TxError::WrongShard)
        );

        // Insufficient balance.
        let broke = wallet_tx(accounts[2], accounts[1], 1, 1);
        assert_eq!(
            validate_tx(&state, &broke, 1, shard_count, false),
            Err(TxError::InsufficientBalance)
        );
    }

    fn leader_block(ps: u32, txs: Vec<Transaction>, shard_count: u32) -> ProposerBlock {
        let leader = NodeId(0);
        let mut outbox: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for (i, tx) in txs.iter().enumerate() {
            let dest = tx.payee.home_shard(shard_count);
            if tx.payer.home_shard(shard_count) == ps && dest != ps {
                outbox.entry(dest).or_default().push(i as u32);
            }
        }
        let mut block = ProposerBlock {
            header: ProposerHeader {
                ps_id: ps,
                height: 1,
                parent_hash: Digest::of(b"genesis"),
                latest_fc_block: Digest::ZERO,
                latest_finalized: Digest::of(b"genesis"),
                tx_root: Digest::ZERO,
                leader,
                leader_sig: Signer::new(leader).sign(Digest::ZERO),
            },
            txs,
            receipts: vec![],
            outbox,
        };
        block.header.tx_root = block.computed_tx_root();
        block.header.leader_sig = Signer::new(leader).sign(block.header.hash());
        block
    }

    #[test]
    fn apply_block_moves_value_and_fills_outbox() {
        let shard_count = 4;
        let local = addrs_on(0, 2);
        let remote = addrs_on(2, 1);
        let mut state = ShardState::default();
        state.credit(local[0], 100);

        let txs = vec![
            wallet_tx(local[0], local[1], 30, 0),
            wallet_tx(local[0], remote[0], 20, 1),
        ];
        let block = leader_block(0, txs, shard_count);
        let effects = apply_block(&mut state, &block, shard_count).unwrap();
        assert_eq!(state.balance(local[0]), 50);
        assert_eq!(state.balance(local[1]), 30);
        assert_eq!(state.balance(remote[0]), 0); // credited on shard 2, not here
        assert_eq!(effects.outbound.get(&2), Some(&20));
        // Replay is rejected.
        assert_eq!(
            apply_block(&mut state, &block, shard_count),
            Err(ApplyError::InvalidBlock("tx replayed on this chain"))
        );
    }

    #[test]
    fn apply_block_rejects_tampered_root_and_outbox() {
        let shard_count = 4;
        let local = addrs_on(0, 2);
        let mut state = ShardState::default();
        state.credit(local[0], 10);
        let mut block = leader_block(0, vec![wallet_tx(local[0], local[1], 1, 0)], shard_count);
        block.header.tx_root = Digest::of(b"bogus");
        assert!(matches!(
            apply_block(&mut state.clone(), &block, shard_count),
            Err(ApplyError::InvalidBlock("tx root mismatch"))
        ));
        let mut block2 = leader_block(0, vec![wallet_tx(local[0], local[1], 1, 1)], shard_count);
        block2.outbox.insert(3, vec![0]);
        block2.header.tx_root = block2.computed_tx_root();
        block2.header.leader_sig = Signer::new(block2.header.leader).sign(block2.header.hash());
        assert!(matches!(
            apply_block(&mut state, &block2, shard_count),
            Err(ApplyError::InvalidBlock("outbox partition mismatch"))
        ));
    }

    /// Receipt round trip over a hand-built shard/committee assignment.
    #[test]
    fn receipt_roundtrip_and_tamper() {
        let params = EpochParams::new(8, 0.0, 2, 2, DEFAULT_EPSILON).unwrap();
        let rand = EpochRandomness::new(1, 0);
        let assignment = crate::identity::derive_assignment(&rand, &params);
        let shard_count = assignment.shard_count();

        // Source shard 0 sends to shard 2 (committee 1's first shard).
        let src_accounts: Vec<Address> = (0u64..)
            .map(Address)
            .filter(|a| a.home_shard(shard_count) == 0)
            .take(1)
            .collect();
        let dst_accounts: Vec<Address> = (0u64..)
            .map(Address)
            .filter(|a| a.home_shard(shard_count) == 2)
            .take(1)
            .collect();
        let tx = wallet_tx(src_accounts[0], dst_accounts[0], 5, 0);

        let leader = assignment.ps_members[0][0];
        let mut block = ProposerBlock {
            header: ProposerHeader {
                ps_id: 0,
                height: 1,
                parent_hash: Digest::of(b"g0"),
                latest_fc_block: Digest::ZERO,
                latest_finalized: Digest::of(b"g0"),
                tx_root: Digest::ZERO,
                leader,
                leader_sig: Signer::new(leader).sign(Digest::ZERO),
            },
            txs: vec![tx],
            receipts: vec![],
            outbox: BTreeMap::from([(2u32, vec![0u32])]),
        };
        block.header.tx_root = block.computed_tx_root();
        block.header.leader_sig = Signer::new(leader).sign(block.header.hash());

        let ps_members = &assignment.ps_members[0];
        let sigs: Vec<Signature> = ps_members
            .iter()
            .map(|&n| Signer::new(n).sign(block.hash()))
            .collect();
        let votes = aggregate(block.hash(), &sigs, ps_members).unwrap();

        let fc_members = &assignment.fc_members[0];
        let fin_body = FinalizerBlock {
            fc_id: 0,
            height: 1,
            parent_hash: Digest::of(b"fc-g"),
            finalized: BTreeMap::from([(0u32, vec![block.hash()])]),
            view_changes: vec![],
        };
        let fin_sigs: Vec<Signature> = fc_members
            .iter()
            .map(|&n| Signer::new(n).sign(fin_body.hash()))
            .collect();
        let fin = CertifiedFinal {
            votes: aggregate(fin_body.hash(), &fin_sigs, fc_members).unwrap(),
            block: fin_body,
        };

        let receipt = build_receipt(&block, votes.clone(), fin.clone(), 2).unwrap();
        assert_eq!(verify_receipt(&receipt, &assignment, &params), Ok(()));

        // Batch tampering breaks the proof.
        let mut bad = receipt.clone();
        bad.batch[0].amount += 1;
        assert_eq!(
            verify_receipt(&bad, &assignment, &params),
            Err(ReceiptError::BadProof)
        );

        // A finalizer block that does not cover the header is rejected.
        let mut unfin = receipt.clone();
        unfin.fin.block.finalized.clear();
        assert!(matches!(
            verify_receipt(&unfin, &assignment, &params),
            Err(ReceiptError::BadFinalCert) | Err(ReceiptError::NotFinalized)
        ));

        // Missing destination errors at build time.
        assert_eq!(
            build_receipt(&block, votes, fin, 3).unwrap_err(),
            ReceiptError::NoSuchBatch(3)
        );
    }

    #[test]
    fn deposit_block_credits_once() {
        // Shard 2 applies a deposit justified by a receipt; replay of the
        // same batch is rejected.
        let shard_count = 4;
        let payer = addrs_on(0, 1)[0];
        let payee = addrs_on(2, 1)[0];
        let tx = wallet_tx(payer, payee, 5, 0);

        let receipt_stub = Receipt {
            source_ps: 0,
            dest_ps: 2,
            batch: vec![tx.clone()],
            proof: MerkleProof {
                index: 0,
                path: vec![],
            },
            header: CertifiedHeader {
                header: ProposerHeader {
                    ps_id: 0,
                    height: 1,
                    parent_hash: Digest::ZERO,
                    latest_fc_block: Digest::ZERO,
                    latest_finalized: Digest::ZERO,
                    tx_root: Digest::ZERO,
                    leader: NodeId(0),
                    leader_sig: Signer::new(NodeId(0)).sign(Digest::ZERO),
                },
                votes: aggregate(Digest::ZERO, &[], &[NodeId(0)]).unwrap(),
            },
            fin: CertifiedFinal {
                block: FinalizerBlock {
                    fc_id: 0,
                    height: 1,
                    parent_hash: Digest::ZERO,
                    finalized: BTreeMap::new(),
                    view_changes: vec![],
                },
                votes: aggregate(Digest::ZERO, &[], &[NodeId(0)]).unwrap(),
            },
        };

        let mut block = leader_block(2, vec![tx], shard_count);
        block.receipts = vec![receipt_stub];
        block.header.tx_root = block.computed_tx_root();
        block.header.leader_sig = Signer::new(block.header.leader).sign(block.header.hash());

        let mut state = ShardState::default();
        let effects = apply_block(&mut state, &block, shard_count).unwrap();
        assert_eq!(state.balance(payee), 5);
        assert_eq!(effects.credited_batches.len(), 1);

        // Second block crediting the same batch is invalid.
        let mut replay = block.clone();
        replay.txs[0].nonce = 99; // different tx, same batch
        replay.txs[0].sig = Wallet::universal().sign(
            payer,
            Transaction::body_digest(payer, payee, 5, 99),
        );
        replay.header.tx_root = replay.computed_tx_root();
        assert_eq!(
            apply_block(&mut state, &replay, shard_count),
            Err(ApplyError::InvalidBlock("batch already credited"))
        );
    }
}
