use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::Proposal;
use crate::types::MemberId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resolution {
    Open,
    Accepted,
    Rejected,
}

/// Decides proposals from ballot results. Application of accepted
/// proposals is shared by all constitutions.
pub trait Constitution {
    fn resolve(
        &self,
        proposal: &Proposal,
        votes: &BTreeMap<MemberId, bool>,
        members: &BTreeSet<MemberId>,
    ) -> Resolution;
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstitutionKind {
    /// Accepted once more than half of all members vote for.
    #[default]
    StrictMajority,
    /// Accepted once the weight in favour exceeds half the total weight.
    /// Members missing from `weights` count 1.
    Weighted { weights: BTreeMap<MemberId, u64> },
    /// Strict majority, but any single vote against from a veto holder rejects.
    Veto { holders: BTreeSet<MemberId> },
    /// Node addition and removal need only one operator vote; everything
    /// else falls back to strict majority.
    OperatorFastPath { operators: BTreeSet<MemberId> },
}

fn majority(for_votes: u64, against: u64, total: u64) -> Resolution {
    let half = total / 2;
    if for_votes > half {
        Resolution::Accepted
    } else if against >= total - half {
        Resolution::Rejected
    } else {
        Resolution::Open
    }
}

const NODE_ACTIONS: &[&str] = &["transition_node_to_trusted", "remove_node"];

impl Constitution for ConstitutionKind {
    fn resolve(
        &self,
        proposal: &Proposal,
        votes: &BTreeMap<MemberId, bool>,
        members: &BTreeSet<MemberId>,
    ) -> Resolution {
        let counted = || votes.iter().filter(|(m, _)| members.contains(m));
        let tally = |weight: &dyn Fn(&MemberId) -> u64| {
            let (mut yes, mut no) = (0, 0);
            for (m, v) in counted() {
                if *v {
                    yes += weight(m);
                } else {
                    no += weight(m);
                }
            }
            (yes, no, members.iter().map(weight).sum::<u64>())
        };
        match self {
            ConstitutionKind::StrictMajority => {
                let (yes, no, total) = tally(&|_| 1);
                majority(yes, no, total)
            }
            ConstitutionKind::Weighted { weights } => {
                let (yes, no, total) = tally(&|m| weights.get(m).copied().unwrap_or(1));
                majority(yes, no, total)
            }
            ConstitutionKind::Veto { holders } => {
                if counted().any(|(m, v)| !*v && holders.contains(m)) {
                    return Resolution::Rejected;
                }
                let (yes, no, total) = tally(&|_| 1);
                majority(yes, no, total)
            }
            ConstitutionKind::OperatorFastPath { operators } => {
                let node_only = !proposal.actions.is_empty()
                    && proposal.actions.iter().all(|a| NODE_ACTIONS.contains(&a.name.as_str()));
                if node_only && counted().any(|(m, v)| *v && operators.contains(m)) {
                    return Resolution::Accepted;
                }
                let (yes, no, total) = tally(&|_| 1);
                majority(yes, no, total)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::governance::Action;
    use serde_json::json;

    fn ids(n: u64) -> BTreeSet<MemberId> {
        (0..n).map(MemberId).collect()
    }

    fn empty() -> Proposal {
        Proposal { actions: vec![] }
    }

    #[test]
    fn strict_majority_examples() {
        let c = ConstitutionKind::StrictMajority;
        let v = |pairs: &[(u64, bool)]| pairs.iter().map(|(m, b)| (MemberId(*m), *b)).collect();
        assert_eq!(
            c.resolve(&empty(), &v(&[(0, true), (1, true)]), &ids(3)),
            Resolution::Accepted
        );
        assert_eq!(c.resolve(&empty(), &v(&[]), &ids(1)), Resolution::Open);
        assert_eq!(
            c.resolve(&empty(), &v(&[(0, true), (1, true)]), &ids(4)),
            Resolution::Open
        );
        assert_eq!(
            c.resolve(&empty(), &v(&[(0, false), (1, false), (2, false)]), &ids(5)),
            Resolution::Rejected
        );
        // votes from non-members are ignored
        assert_eq!(
            c.resolve(&empty(), &v(&[(7, true), (8, true)]), &ids(3)),
            Resolution::Open
        );
    }

    #[test]
    fn alternates() {
        let v: BTreeMap<_, _> = [(MemberId(0), true)].into();
        let weighted = ConstitutionKind::Weighted {
            weights: [(MemberId(0), 5)].into(),
        };
        assert_eq!(weighted.resolve(&empty(), &v, &ids(3)), Resolution::Accepted);
        let veto = ConstitutionKind::Veto {
            holders: [MemberId(2)].into(),
        };
        let v2: BTreeMap<_, _> = [(MemberId(0), true), (MemberId(1), true), (MemberId(2), false)].into();
        assert_eq!(veto.resolve(&empty(), &v2, &ids(3)), Resolution::Rejected);
        let fast = ConstitutionKind::OperatorFastPath {
            operators: [MemberId(0)].into(),
        };
        let add = Proposal {
            actions: vec![Action::new("transition_node_to_trusted", json!({"node_id": 3}))],
        };
        assert_eq!(fast.resolve(&add, &v, &ids(3)), Resolution::Accepted);
        assert_eq!(fast.resolve(&empty(), &v, &ids(3)), Resolution::Open);
    }
}
