//! Adversary strategies and their hooks into the engine.
//!
//! A scenario describes attack groups: which nodes misbehave, how, and from
//! when. Node selection is deterministic. Behavior plugs in at three seams:
//! an outbound message filter at the engine (muting, complaint suppression),
//! a proposal-shaping mode inside the shard leader logic, and a blind-voting
//! flag that makes colluders endorse a malicious leader's blocks without
//! validation (including both sides of an equivocation).

use crate::identity::{select_leader, Assignment, EpochRandomness, NodeId};
use crate::ledger::Complaint;
use crate::simnet::msg::{Msg, SimTime};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::sync::Arc;
use thiserror::Error;

/// What a misbehaving node does once its group activates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Crash-silent: every outbound message is dropped.
    Silent,
    /// Stays online but never proposes when it holds a leader seat.
    SilentLeader,
    /// As leader, produces two conflicting blocks per height and shows each
    /// half of the honest members a different one.
    Equivocator,
    /// As leader, appends a transaction that spends from an empty account.
    Manipulator,
    /// Marked malicious for accounting but behaves correctly.
    Passive,
}

impl Strategy {
    /// Proposal shaping for a leader seat under this strategy.
    pub fn proposal_mode(&self) -> ProposalMode {
        match self {
            Strategy::Silent | Strategy::SilentLeader => ProposalMode::Suppress,
            Strategy::Equivocator => ProposalMode::Equivocate,
            Strategy::Manipulator => ProposalMode::Taint,
            Strategy::Passive => ProposalMode::Normal,
        }
    }

    /// Whether group members endorse malicious-led blocks without checking.
    pub fn blind_votes(&self) -> bool {
        matches!(self, Strategy::Equivocator | Strategy::Manipulator)
    }
}

/// How a shard leader builds (or withholds) its next block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProposalMode {
    #[default]
    Normal,
    /// Propose nothing.
    Suppress,
    /// Produce a pair of conflicting blocks and split the audience.
    Equivocate,
    /// Append one invalid transaction.
    Taint,
}

/// Which nodes a group claims.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum Selection {
    /// A fraction of the whole network, drawn from the epoch's deterministic
    /// malicious shuffle, skipping nodes already claimed by earlier groups.
    Fraction { fraction: f64 },
    /// Specific seats inside one shard.
    Planted {
        ps: u32,
        count: u32,
        #[serde(default)]
        include_leader: bool,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackGroup {
    pub strategy: Strategy,
    pub selection: Selection,
    /// Time units; the group behaves honestly before this.
    #[serde(default)]
    pub activate_at: SimTime,
}

/// A full attack description: zero or more disjoint groups.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackPlan {
    #[serde(default)]
    pub groups: Vec<AttackGroup>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("group {0}: fraction outside [0, 1)")]
    BadFraction(usize),
    #[error("group {0}: shard {1} does not exist")]
    NoSuchShard(usize, u32),
    #[error("group {group}: wants {want} nodes from shard {ps} but only {have} remain unclaimed")]
    ShardExhausted {
        group: usize,
        want: u32,
        ps: u32,
        have: u32,
    },
}

/// One node's resolved behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Behavior {
    pub strategy: Strategy,
    pub activate_at: SimTime,
}

/// Attack plan resolved against an epoch: per-node behaviors plus the
/// overall malicious set (used for colluder knowledge and reporting).
#[derive(Debug, Clone, Default)]
pub struct ResolvedPlan {
    /// node -> behavior; nodes absent here are honest.
    pub behaviors: std::collections::BTreeMap<NodeId, Behavior>,
    pub malicious: Arc<BTreeSet<NodeId>>,
}

impl ResolvedPlan {
    pub fn behavior(&self, node: NodeId) -> Option<Behavior> {
        self.behaviors.get(&node).copied()
    }

    /// Malicious members per committee, for reporting and safety checks.
    pub fn per_fc_counts(&self, assignment: &Assignment) -> Vec<u32> {
        let mut counts = vec![0u32; assignment.fc_members.len()];
        for &n in self.malicious.iter() {
            counts[assignment.fc_of_node(n) as usize] += 1;
        }
        counts
    }
}

/// Resolve group selections to concrete nodes. Fraction groups consume the
/// epoch's malicious shuffle in order; planted groups take the named shard's
/// initial leader first when asked, then the lowest-numbered unclaimed
/// members. Groups never overlap.
pub fn resolve_plan(
    plan: &AttackPlan,
    assignment: &Assignment,
    rand: &EpochRandomness,
    network_size: u64,
) -> Result<ResolvedPlan, PlanError> {
    let mut behaviors = std::collections::BTreeMap::new();
    let mut claimed: BTreeSet<NodeId> = BTreeSet::new();
    // The deterministic shuffle fraction groups draw from.
    let shuffle = crate::identity::malicious_shuffle(rand, network_size);

    for (gi, group) in plan.groups.iter().enumerate() {
        let picks: Vec<NodeId> = match &group.selection {
            Selection::Fraction { fraction } => {
                if !(0.0..1.0).contains(fraction) {
                    return Err(PlanError::BadFraction(gi));
                }
                let want = (fraction * network_size as f64).floor() as usize;
                shuffle
                    .iter()
                    .copied()
                    .filter(|n| !claimed.contains(n))
                    .take(want)
                    .collect()
            }
            Selection::Planted {
                ps,
                count,
                include_leader,
            } => {
                let members = assignment
                    .ps_members
                    .get(*ps as usize)
                    .ok_or(PlanError::NoSuchShard(gi, *ps))?;
                let mut picks = Vec::new();
                if *include_leader {
                    let leader = select_leader(members, 0, rand, *ps);
                    if !claimed.contains(&leader) {
                        picks.push(leader);
                    }
                }
                for &m in members.iter() {
                    if picks.len() as u32 >= *count {
                        break;
                    }
                    if !claimed.contains(&m) && !picks.contains(&m) {
                        picks.push(m);
                    }
                }
                if (picks.len() as u32) < *count {
                    return Err(PlanError::ShardExhausted {
                        group: gi,
                        want: *count,
                        ps: *ps,
                        have: picks.len() as u32,
                    });
                }
                picks
            }
        };
        for n in picks {
            claimed.insert(n);
            behaviors.insert(
                n,
                Behavior {
                    strategy: group.strategy,
                    activate_at: group.activate_at,
                },
            );
        }
    }
    let malicious: BTreeSet<NodeId> = behaviors.keys().copied().collect();
    Ok(ResolvedPlan {
        behaviors,
        malicious: Arc::new(malicious),
    })
}

/// Engine-side outbound filter. Returns false when the message must be
/// dropped at the sender.
pub fn allow_send(
    behavior: Option<Behavior>,
    now: SimTime,
    msg: &Msg,
    malicious: &BTreeSet<NodeId>,
) -> bool {
    let Some(b) = behavior else { return true };
    if now < b.activate_at {
        return true;
    }
    match b.strategy {
        Strategy::Silent => false,
        // Colluders never help remove their own: complaints naming a
        // malicious suspect are swallowed.
        _ => match msg {
            Msg::Complain(c) => !is_protected(c, malicious),
            _ => true,
        },
    }
}

fn is_protected(c: &Complaint, malicious: &BTreeSet<NodeId>) -> bool {
    malicious.contains(&c.suspect)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::{derive_assignment, Signer};
    use crate::ledger::ComplaintReason;
    use crate::secparams::{EpochParams, DEFAULT_EPSILON};

    fn setup() -> (Assignment, EpochRandomness, EpochParams) {
        let params = EpochParams::new(16, 0.25, 2, 2, DEFAULT_EPSILON).unwrap();
        let rand = EpochRandomness::new(7, 0);
        let assignment = derive_assignment(&rand, &params);
        (assignment, rand, params)
    }

    #[test]
    fn planted_selection_takes_leader_then_low_ids() {
        let (assignment, rand, _) = setup();
        let plan = AttackPlan {
            groups: vec![AttackGroup {
                strategy: Strategy::Equivocator,
                selection: Selection::Planted {
                    ps: 1,
                    count: 3,
                    include_leader: true,
                },
                activate_at: 0,
            }],
        };
        let resolved = resolve_plan(&plan, &assignment, &rand, 16).unwrap();
        assert_eq!(resolved.malicious.len(), 3);
        let leader = select_leader(&assignment.ps_members[1], 0, &rand, 1);
        assert!(resolved.malicious.contains(&leader));
        for n in resolved.malicious.iter() {
            assert!(assignment.ps_members[1].contains(n));
        }
    }

    #[test]
    fn fraction_groups_are_disjoint_and_deterministic() {
        let (assignment, rand, _) = setup();
        let plan = AttackPlan {
            groups: vec![
                AttackGroup {
                    strategy: Strategy::Silent,
                    selection: Selection::Fraction { fraction: 0.25 },
                    activate_at: 0,
                },
                AttackGroup {
                    strategy: Strategy::Passive,
                    selection: Selection::Fraction { fraction: 0.25 },
                    activate_at: 5,
                },
            ],
        };
        let a = resolve_plan(&plan, &assignment, &rand, 16).unwrap();
        let b = resolve_plan(&plan, &assignment, &rand, 16).unwrap();
        assert_eq!(a.malicious, b.malicious);
        assert_eq!(a.malicious.len(), 8);
        let silents: Vec<_> = a
            .behaviors
            .values()
            .filter(|b| b.strategy == Strategy::Silent)
            .collect();
        assert_eq!(silents.len(), 4);
    }

    #[test]
    fn per_fc_counts_sum_to_total() {
        let (assignment, rand, _) = setup();
        let plan = AttackPlan {
            groups: vec![AttackGroup {
                strategy: Strategy::Silent,
                selection: Selection::Fraction { fraction: 0.4 },
                activate_at: 0,
            }],
        };
        let resolved = resolve_plan(&plan, &assignment, &rand, 16).unwrap();
        let counts = resolved.per_fc_counts(&assignment);
        assert_eq!(
            counts.iter().sum::<u32>() as usize,
            resolved.malicious.len()
        );
    }

    #[test]
    fn silent_drops_everything_after_activation_only() {
        let behavior = Some(Behavior {
            strategy: Strategy::Silent,
            activate_at: 100,
        });
        let empty = BTreeSet::new();
        let msg = Msg::BlockRequest(crate::digest::Digest::ZERO);
        assert!(allow_send(behavior, 99, &msg, &empty));
        assert!(!allow_send(behavior, 100, &msg, &empty));
        assert!(allow_send(None, 100, &msg, &empty));
    }

    #[test]
    fn colluders_swallow_complaints_against_their_own() {
        let suspect = NodeId(3);
        let complainer = NodeId(5);
        let mut malicious = BTreeSet::new();
        malicious.insert(suspect);
        let digest =
            Complaint::body_digest_of(0, 0, suspect, &ComplaintReason::NoProposal, complainer);
        let complaint = Arc::new(Complaint {
            ps_id: 0,
            view: 0,
            suspect,
            reason: ComplaintReason::NoProposal,
            complainer,
            sig: Signer::new(complainer).sign(digest),
        });
        let behavior = Some(Behavior {
            strategy: Strategy::Equivocator,
            activate_at: 0,
        });
        assert!(!allow_send(
            behavior,
            0,
            &Msg::Complain(complaint.clone()),
            &malicious
        ));
        // Complaints against honest suspects pass, as does everything else.
        let honest_digest =
            Complaint::body_digest_of(0, 0, NodeId(9), &ComplaintReason::NoProposal, complainer);
        let against_honest = Arc::new(Complaint {
            suspect: NodeId(9),
            sig: Signer::new(complainer).sign(honest_digest),
            ..(*complaint).clone()
        });
        assert!(allow_send(
            behavior,
            0,
            &Msg::Complain(against_honest),
            &malicious
        ));
    }
}
