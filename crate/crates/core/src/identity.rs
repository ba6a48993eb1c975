//! Node identity, epoch randomness, shard/committee assignment, leader
//! selection, and the simulated signature scheme.
//!
//! Signatures here are simulation objects: a `Signature` can only be minted
//! through a `Signer`, and the engine hands each node the signer for its own
//! id alone. Within the simulation that makes signatures unforgeable by
//! construction while staying trivially cheap.

use crate::digest::{Canonical, Digest, Enc};
use crate::secparams::EpochParams;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

/// Index of a node in the network, dense in `0..network_size`.
#[derive(
    Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Debug, Default,
)]
pub struct NodeId(pub u32);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Shared per-epoch randomness. Every deterministic draw in the system is a
/// labeled stream derived from this seed, so independent concerns (shard
/// layout, adversary placement, leader picks, network delays) cannot
/// correlate by accident.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochRandomness {
    pub seed: u64,
    pub epoch: u64,
}

impl EpochRandomness {
    pub fn new(seed: u64, epoch: u64) -> Self {
        EpochRandomness { seed, epoch }
    }

    /// ChaCha stream keyed by (seed, epoch, label, salt).
    pub fn stream(&self, label: &str, salt: u64) -> ChaCha8Rng {
        let mut e = Enc::tagged(0x01);
        e.u64(self.seed).u64(self.epoch).bytes(label.as_bytes()).u64(salt);
        let d = Digest::of(&e.finish());
        ChaCha8Rng::from_seed(d.0)
    }

    /// Single uniform index in `0..bound` from a labeled hash draw.
    pub fn pick(&self, label: &str, salt: u64, bound: u64) -> u64 {
        assert!(bound > 0);
        let mut e = Enc::tagged(0x02);
        e.u64(self.seed).u64(self.epoch).bytes(label.as_bytes()).u64(salt);
        let d = Digest::of(&e.finish());
        u64::from_le_bytes(d.0[..8].try_into().unwrap()) % bound
    }
}

/// Epoch assignment of every node to one proposer shard and, through it,
/// one finalizer committee. Shards and committees are 0-indexed; the K
/// shards `fc*K ..= fc*K+K-1` sit under committee `fc`, i.e. `fc = ps / K`.
#[derive(Debug, Clone)]
pub struct Assignment {
    /// Members of each proposer shard, ascending by node id.
    pub ps_members: Vec<Vec<NodeId>>,
    /// Members of each finalizer committee, ascending by node id.
    pub fc_members: Vec<Vec<NodeId>>,
    /// Proposer shard of each node.
    pub ps_of: Vec<u32>,
    pub ps_per_fc: u32,
}

impl Assignment {
    pub fn shard_count(&self) -> u32 {
        self.ps_members.len() as u32
    }

    pub fn fc_of_ps(&self, ps: u32) -> u32 {
        ps / self.ps_per_fc
    }

    pub fn fc_of_node(&self, node: NodeId) -> u32 {
        self.fc_of_ps(self.ps_of[node.0 as usize])
    }

    /// Proposer shards safeguarded by committee `fc`.
    pub fn ps_under_fc(&self, fc: u32) -> std::ops::Range<u32> {
        fc * self.ps_per_fc..(fc + 1) * self.ps_per_fc
    }
}

/// Permute the network with the epoch's assignment stream and cut it into
/// consecutive chunks of m: shard j takes permuted positions [j·m, (j+1)·m).
pub fn derive_assignment(rand: &EpochRandomness, params: &EpochParams) -> Assignment {
    let n = params.network_size as u32;
    let m = params.ps_size as usize;
    let shard_count = params.shard_count() as usize;
    let mut perm: Vec<NodeId> = (0..n).map(NodeId).collect();
    perm.shuffle(&mut rand.stream("assign", 0));

    let mut ps_members = Vec::with_capacity(shard_count);
    let mut ps_of = vec![0u32; n as usize];
    for ps in 0..shard_count {
        let mut members: Vec<NodeId> = perm[ps * m..(ps + 1) * m].to_vec();
        members.sort_unstable();
        for node in &members {
            ps_of[node.0 as usize] = ps as u32;
        }
        ps_members.push(members);
    }
    let k = params.ps_per_fc as usize;
    let fc_members = (0..params.fc_count as usize)
        .map(|fc| {
            let mut all: Vec<NodeId> = (fc * k..(fc + 1) * k)
                .flat_map(|ps| ps_members[ps].iter().copied())
                .collect();
            all.sort_unstable();
            all
        })
        .collect();
    Assignment {
        ps_members,
        fc_members,
        ps_of,
        ps_per_fc: params.ps_per_fc as u32,
    }
}

/// Deterministic whole-network shuffle on the adversary-placement stream.
/// Attack groups sized by fraction claim nodes from its prefix, so placement
/// is independent of the shard layout.
pub fn malicious_shuffle(rand: &EpochRandomness, network_size: u64) -> Vec<NodeId> {
    let mut all: Vec<NodeId> = (0..network_size as u32).map(NodeId).collect();
    all.shuffle(&mut rand.stream("malicious", 0));
    all
}

/// Sample the malicious population ⌊f·N⌋, the prefix of the placement
/// shuffle.
pub fn assign_malicious(rand: &EpochRandomness, params: &EpochParams) -> BTreeSet<NodeId> {
    malicious_shuffle(rand, params.network_size)
        .into_iter()
        .take(params.malicious_count() as usize)
        .collect()
}

/// Leader of a shard at a given view: the view-0 leader is a hash pick over
/// the members, later views rotate round-robin. View changes that install a
/// specific complainer override this (see the finalizer layer).
pub fn select_leader(members: &[NodeId], view: u64, rand: &EpochRandomness, ps: u32) -> NodeId {
    let base = rand.pick("ps-leader", ps as u64, members.len() as u64);
    members[((base + view) % members.len() as u64) as usize]
}

/// Deterministic replacement pick among complainers, keyed by the epoch
/// randomness and the (shard, view) being changed.
pub fn pick_new_leader(
    complainers: &BTreeSet<NodeId>,
    view: u64,
    rand: &EpochRandomness,
    ps: u32,
) -> NodeId {
    assert!(!complainers.is_empty());
    let idx = rand.pick("view-change", (ps as u64) << 32 | view, complainers.len() as u64);
    *complainers.iter().nth(idx as usize).unwrap()
}

/// A signature over a digest, mintable only through [`Signer`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Signature {
    signer: NodeId,
    digest: Digest,
}

impl Signature {
    pub fn signer(&self) -> NodeId {
        self.signer
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }
}

impl Canonical for Signature {
    fn canonical_bytes(&self) -> Vec<u8> {
        let mut e = Enc::tagged(0x11);
        e.u32(self.signer.0).digest(&self.digest);
        e.finish()
    }
}

/// Signing capability for one node. The engine constructs one per node and
/// never shares it; a malicious node can double-sign with its own signer but
/// cannot sign as anyone else.
#[derive(Debug, Clone)]
pub struct Signer {
    node: NodeId,
}

impl Signer {
    pub fn new(node: NodeId) -> Signer {
        Signer { node }
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn sign(&self, digest: Digest) -> Signature {
        Signature {
            signer: self.node,
            digest,
        }
    }
}

/// True iff `sig` was issued by `signer` over exactly `digest`.
pub fn verify(sig: &Signature, signer: NodeId, digest: Digest) -> bool {
    sig.signer == signer && sig.digest == digest
}

/// Compact membership bitmap; bit i stands for the i-th member (ascending
/// id order) of the shard or committee the aggregate is scoped to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    len: u32,
    words: Vec<u64>,
}

impl Bitmap {
    pub fn new(len: u32) -> Bitmap {
        Bitmap {
            len,
            words: vec![0; (len as usize + 63) / 64],
        }
    }

    pub fn set(&mut self, i: u32) {
        assert!(i < self.len);
        self.words[(i / 64) as usize] |= 1u64 << (i % 64);
    }

    pub fn get(&self, i: u32) -> bool {
        i < self.len && self.words[(i / 64) as usize] >> (i % 64) & 1 == 1
    }

    pub fn count(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn len(&self) -> u32 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

impl Canonical for Bitmap {
    fn canonical_bytes(&self) -> Vec<u8> {
        let mut e = Enc::tagged(0x12);
        e.u32(self.len);
        for w in &self.words {
            e.u64(*w);
        }
        e.finish()
    }
}

/// Aggregated votes over one digest: the digest plus a membership bitmap of
/// who signed it. Construction is gated through [`aggregate`] from real
/// signatures, mirroring multi-signature verification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregateVotes {
    digest: Digest,
    signers: Bitmap,
}

impl AggregateVotes {
    pub fn digest(&self) -> Digest {
        self.digest
    }

    pub fn signers(&self) -> &Bitmap {
        &self.signers
    }
}

impl Canonical for AggregateVotes {
    fn canonical_bytes(&self) -> Vec<u8> {
        let mut e = Enc::tagged(0x13);
        e.digest(&self.digest);
        e.bytes(&self.signers.canonical_bytes());
        e.finish()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VoteError {
    #[error("signer {0} is not a member of this group")]
    UnknownSigner(NodeId),
}

/// Fold signatures over `digest` into an aggregate scoped to `members`
/// (ascending id order). Signatures over other digests are skipped (they
/// belong to some other aggregation); non-member signers are an error.
/// Idempotent per signer.
pub fn aggregate(
    digest: Digest,
    sigs: &[Signature],
    members: &[NodeId],
) -> Result<AggregateVotes, VoteError> {
    let mut signers = Bitmap::new(members.len() as u32);
    for sig in sigs {
        if sig.digest != digest {
            continue;
        }
        match members.binary_search(&sig.signer) {
            Ok(idx) => signers.set(idx as u32),
            Err(_) => return Err(VoteError::UnknownSigner(sig.signer)),
        }
    }
    Ok(AggregateVotes { digest, signers })
}

/// Distinct valid signers in the aggregate with respect to `members`.
/// An aggregate scoped to a different group size counts nothing.
pub fn count_valid(votes: &AggregateVotes, members: &[NodeId]) -> u64 {
    if votes.signers.len() != members.len() as u32 {
        return 0;
    }
    votes.signers.count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::secparams::DEFAULT_EPSILON;

    fn params_64() -> EpochParams {
        EpochParams::new(64, 0.25, 2, 2, DEFAULT_EPSILON).unwrap()
    }

    #[test]
    fn assignment_partitions_network() {
        let rand = EpochRandomness::new(7, 0);
        let p = params_64();
        let a = derive_assignment(&rand, &p);
        assert_eq!(a.ps_members.len(), 4);
        assert_eq!(a.fc_members.len(), 2);
        let mut seen = BTreeSet::new();
        for (ps, members) in a.ps_members.iter().enumerate() {
            assert_eq!(members.len(), 16);
            for w in members.windows(2) {
                assert!(w[0] < w[1], "members sorted");
            }
            for node in members {
                assert!(seen.insert(*node), "node in two shards");
                assert_eq!(a.ps_of[node.0 as usize], ps as u32);
            }
        }
        assert_eq!(seen.len(), 64);
        // Committee = union of its K shards.
        for fc in 0..2u32 {
            let mut want: Vec<NodeId> = a
                .ps_under_fc(fc)
                .flat_map(|ps| a.ps_members[ps as usize].iter().copied())
                .collect();
            want.sort_unstable();
            assert_eq!(a.fc_members[fc as usize], want);
            assert_eq!(a.fc_members[fc as usize].len(), 32);
        }
    }

    #[test]
    fn shard_to_committee_rule() {
        // K = 4: shards 0..=3 under committee 0, shard 4 under committee 1.
        let p = EpochParams::new(64, 0.25, 2, 4, DEFAULT_EPSILON).unwrap();
        let a = derive_assignment(&EpochRandomness::new(1, 0), &p);
        assert_eq!(a.fc_of_ps(3), 0);
        assert_eq!(a.fc_of_ps(4), 1);
        assert_eq!(a.ps_under_fc(1), 4..8);
    }

    #[test]
    fn assignment_deterministic_and_seed_sensitive() {
        let p = params_64();
        let a = derive_assignment(&EpochRandomness::new(3, 1), &p);
        let b = derive_assignment(&EpochRandomness::new(3, 1), &p);
        let c = derive_assignment(&EpochRandomness::new(4, 1), &p);
        assert_eq!(a.ps_members, b.ps_members);
        assert_ne!(a.ps_members, c.ps_members);
    }

    #[test]
    fn malicious_set_independent_of_layout() {
        let p = params_64();
        let rand = EpochRandomness::new(11, 0);
        let mal = assign_malicious(&rand, &p);
        assert_eq!(mal.len(), 16);
        let again = assign_malicious(&rand, &p);
        assert_eq!(mal, again);
    }

    #[test]
    fn leader_rotates_round_robin() {
        let members: Vec<NodeId> = (0..8).map(NodeId).collect();
        let rand = EpochRandomness::new(5, 0);
        let l0 = select_leader(&members, 0, &rand, 2);
        let l1 = select_leader(&members, 1, &rand, 2);
        let pos0 = members.iter().position(|&x| x == l0).unwrap();
        let pos1 = members.iter().position(|&x| x == l1).unwrap();
        assert_eq!((pos0 + 1) % 8, pos1);
        // A full cycle returns to the start.
        assert_eq!(select_leader(&members, 8, &rand, 2), l0);
    }

    #[test]
    fn signatures_verify_only_for_their_pair() {
        let s = Signer::new(NodeId(3));
        let d = Digest::of(b"block");
        let sig = s.sign(d);
        assert!(verify(&sig, NodeId(3), d));
        assert!(!verify(&sig, NodeId(4), d));
        assert!(!verify(&sig, NodeId(3), Digest::of(b"other")));
    }

    #[test]
    fn aggregate_counts_distinct_members_only() {
        let members: Vec<NodeId> = (0..6).map(NodeId).collect();
        let d = Digest::of(b"h");
        let sigs: Vec<Signature> = [0u32, 2, 2, 4]
            .iter()
            .map(|&i| Signer::new(NodeId(i)).sign(d))
            .collect();
        let agg = aggregate(d, &sigs, &members).unwrap();
        assert_eq!(count_valid(&agg, &members), 3); // duplicate collapses
        assert!(agg.signers().get(0) && agg.signers().get(2) && agg.signers().get(4));
    }

    #[test]
    fn aggregate_rejects_unknown_signer() {
        let members: Vec<NodeId> = (0..4).map(NodeId).collect();
        let d = Digest::of(b"h");
        let sig = Signer::new(NodeId(9)).sign(d);
        assert_eq!(
            aggregate(d, &[sig], &members).unwrap_err(),
            VoteError::UnknownSigner(NodeId(9))
        );
    }

    #[test]
    fn aggregate_skips_foreign_digests_and_scopes_count() {
        let members: Vec<NodeId> = (0..4).map(NodeId).collect();
        let d = Digest::of(b"h");
        let other = Signer::new(NodeId(1)).sign(Digest::of(b"x"));
        let mine = Signer::new(NodeId(0)).sign(d);
        let agg = aggregate(d, &[other, mine], &members).unwrap();
        assert_eq!(count_valid(&agg, &members), 1);
        // Wrong group size counts as zero.
        let bigger: Vec<NodeId> = (0..8).map(NodeId).collect();
        assert_eq!(count_valid(&agg, &bigger), 0);
    }
}
