//! Safety invariants evaluated over a recorded trace.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::trace::{Outcome, TraceEvent, TraceRecord};
use crate::consensus::{Configuration, ConsensusEvent, Role};
use crate::crypto::Digest;
use crate::ledger::TransactionStatus;
use crate::node::NodeEvent;
use crate::types::{NodeId, TransactionId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Invariant {
    ElectionSafety,
    VoteUniqueness,
    LogMatching,
    CommitDurability,
    CommitAgreement,
    StatusFinality,
    ReconfigurationQuorum,
}

impl Invariant {
    pub const ALL: [Invariant; 7] = [
        Invariant::ElectionSafety,
        Invariant::VoteUniqueness,
        Invariant::LogMatching,
        Invariant::CommitDurability,
        Invariant::CommitAgreement,
        Invariant::StatusFinality,
        Invariant::ReconfigurationQuorum,
    ];
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub invariant: Invariant,
    /// Index of the offending trace record.
    pub index: usize,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckReport {
    pub records: usize,
    pub elections: u64,
    pub commits: u64,
    pub status_observations: u64,
    pub findings: Vec<Finding>,
}

impl CheckReport {
    pub fn ok(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn first_violation(&self) -> Option<&Finding> {
        self.findings.first()
    }

    pub fn count(&self, inv: Invariant) -> usize {
        self.findings.iter().filter(|f| f.invariant == inv).count()
    }
}

#[derive(Default)]
struct NodeView {
    entries: BTreeMap<u64, (TransactionId, Digest)>,
    base: u64,
    commit: u64,
    statuses: BTreeMap<TransactionId, TransactionStatus>,
}

#[derive(Default)]
struct State {
    leaders: BTreeMap<u64, NodeId>,
    votes: BTreeMap<(NodeId, u64), NodeId>,
    roots: BTreeMap<TransactionId, Digest>,
    committed: BTreeMap<u64, (TransactionId, Digest)>,
    max_commit: u64,
    committed_config: Option<Configuration>,
    observed: BTreeMap<TransactionId, TransactionStatus>,
    nodes: BTreeMap<NodeId, NodeView>,
}

struct Checker {
    state: State,
    report: CheckReport,
    index: usize,
}

fn majority(cfg: &Configuration, set: &BTreeSet<NodeId>) -> bool {
    2 * cfg.nodes.iter().filter(|n| set.contains(n)).count() > cfg.nodes.len()
}

impl Checker {
    fn flag(&mut self, invariant: Invariant, detail: String) {
        self.report.findings.push(Finding {
            invariant,
            index: self.index,
            detail,
        });
    }

    /// Decisions must be taken against configurations that reach back at
    /// least to the newest committed one, with a majority in each.
    fn check_quorum(&mut self, what: &str, node: NodeId, set: &BTreeSet<NodeId>, configs: &[Configuration]) {
        for c in configs {
            if !majority(c, set) {
                self.flag(
                    Invariant::ReconfigurationQuorum,
                    format!(
                        "{what} by {node}: {set:?} is not a majority of config@{} {:?}",
                        c.seqno, c.nodes
                    ),
                );
                return;
            }
        }
        if let Some(known) = &self.state.committed_config {
            let covered = configs.iter().any(|c| c.seqno > known.seqno || c.nodes == known.nodes);
            if !covered {
                self.flag(
                    Invariant::ReconfigurationQuorum,
                    format!(
                        "{what} by {node} ignores committed config@{} {:?}",
                        known.seqno, known.nodes
                    ),
                );
            }
        }
    }

    fn observe_status(&mut self, node: NodeId, txid: TransactionId, status: TransactionStatus) {
        self.report.status_observations += 1;
        if !status.is_final() {
            let prior = self.state.nodes.entry(node).or_default().statuses.get(&txid).copied();
            if let Some(p) = prior {
                self.flag(
                    Invariant::StatusFinality,
                    format!("{node} reported {txid} as {status:?} after {p:?}"),
                );
            }
            return;
        }
        if let Some(prev) = self.state.observed.get(&txid) {
            if *prev != status {
                self.flag(
                    Invariant::StatusFinality,
                    format!("{txid} observed as both {prev:?} and {status:?}"),
                );
            }
        }
        self.state.observed.insert(txid, status);
        self.state.nodes.entry(node).or_default().statuses.insert(txid, status);
        self.check_observation(txid, status);
    }

    fn check_observation(&mut self, txid: TransactionId, status: TransactionStatus) {
        let Some((held, _)) = self.state.committed.get(&txid.seqno).copied() else {
            return;
        };
        let bad = match status {
            TransactionStatus::Committed => held != txid,
            TransactionStatus::Invalid => held == txid,
            _ => false,
        };
        if bad {
            self.flag(
                Invariant::StatusFinality,
                format!("{txid} reported {status:?} but {held} is committed at that seqno"),
            );
        }
    }

    fn on_consensus(&mut self, node: NodeId, ev: &ConsensusEvent) {
        match ev {
            ConsensusEvent::Role {
                role: Role::Primary,
                view,
            } => {
                self.report.elections += 1;
                match self.state.leaders.get(view) {
                    Some(prev) if *prev != node => {
                        self.flag(
                            Invariant::ElectionSafety,
                            format!("view {view} led by {prev} and {node}"),
                        );
                    }
                    _ => {
                        self.state.leaders.insert(*view, node);
                    }
                }
                if let Some(&(txid, root)) = self.state.committed.get(&self.state.max_commit) {
                    let view = self.state.nodes.entry(node).or_default();
                    if txid.seqno > view.base && view.entries.get(&txid.seqno) != Some(&(txid, root)) {
                        self.flag(
                            Invariant::CommitDurability,
                            format!("{node} leads without committed {txid}"),
                        );
                    }
                }
            }
            ConsensusEvent::Role { .. } => {}
            ConsensusEvent::Elected { votes, configs, .. } => {
                self.check_quorum("election", node, votes, configs);
            }
            ConsensusEvent::Voted { view, candidate } => match self.state.votes.get(&(node, *view)) {
                Some(prev) if prev != candidate => {
                    self.flag(
                        Invariant::VoteUniqueness,
                        format!("{node} voted for {prev} and {candidate} in view {view}"),
                    );
                }
                _ => {
                    self.state.votes.insert((node, *view), *candidate);
                }
            },
            ConsensusEvent::Appended { txid, root, .. } => {
                match self.state.roots.get(txid) {
                    Some(r) if r != root => {
                        self.flag(
                            Invariant::LogMatching,
                            format!("{node} holds {txid} over a different prefix"),
                        );
                    }
                    Some(_) => {}
                    None => {
                        self.state.roots.insert(*txid, *root);
                    }
                }
                if let Some(&(c, croot)) = self.state.committed.get(&txid.seqno) {
                    if c == *txid && croot != *root {
                        self.flag(
                            Invariant::CommitAgreement,
                            format!("{node} appended {txid} with a diverging root"),
                        );
                    }
                }
                self.state
                    .nodes
                    .entry(node)
                    .or_default()
                    .entries
                    .insert(txid.seqno, (*txid, *root));
            }
            ConsensusEvent::Truncated { to } => {
                let removed: Vec<(u64, (TransactionId, Digest))> = {
                    let view = self.state.nodes.entry(node).or_default();
                    let tail = view.entries.split_off(&(to + 1));
                    tail.into_iter().collect()
                };
                let commit = self.state.nodes.get(&node).map_or(0, |v| v.commit);
                for (seqno, held) in removed {
                    if seqno <= commit || self.state.committed.get(&seqno) == Some(&held) {
                        self.flag(
                            Invariant::CommitDurability,
                            format!("{node} rolled back committed {}", held.0),
                        );
                        break;
                    }
                }
            }
            ConsensusEvent::Committed {
                txid,
                root,
                quorum,
                configs,
            } => {
                self.report.commits += 1;
                let prev_commit = self.state.nodes.entry(node).or_default().commit;
                if txid.seqno < prev_commit {
                    self.flag(
                        Invariant::CommitDurability,
                        format!("{node} commit went back from {prev_commit} to {}", txid.seqno),
                    );
                }
                if let Some(q) = quorum {
                    self.check_quorum("commit", node, q, configs);
                }
                let held: Vec<(u64, (TransactionId, Digest))> = {
                    let view = self.state.nodes.entry(node).or_default();
                    view.commit = view.commit.max(txid.seqno);
                    if view.entries.get(&txid.seqno).map(|e| e.1) != Some(*root) && txid.seqno > view.base {
                        Vec::new()
                    } else {
                        view.entries
                            .range(prev_commit + 1..=txid.seqno)
                            .map(|(s, e)| (*s, *e))
                            .collect()
                    }
                };
                if held.is_empty() && txid.seqno > prev_commit {
                    let base = self.state.nodes.get(&node).map_or(0, |v| v.base);
                    if txid.seqno > base {
                        self.flag(
                            Invariant::CommitAgreement,
                            format!("{node} committed {txid} it does not hold"),
                        );
                    }
                }
                for (seqno, e) in held {
                    match self.state.committed.get(&seqno) {
                        Some(c) if *c != e => {
                            self.flag(
                                Invariant::CommitAgreement,
                                format!("{node} committed {} where {} is committed", e.0, c.0),
                            );
                        }
                        Some(_) => {}
                        None => {
                            self.state.committed.insert(seqno, e);
                            let hits: Vec<(TransactionId, TransactionStatus)> = self
                                .state
                                .observed
                                .iter()
                                .filter(|(t, _)| t.seqno == seqno)
                                .map(|(t, s)| (*t, *s))
                                .collect();
                            for (t, s) in hits {
                                self.check_observation(t, s);
                            }
                        }
                    }
                }
                self.state.max_commit = self.state.max_commit.max(txid.seqno);
                if let Some(newest) = configs.iter().rfind(|c| c.seqno <= txid.seqno) {
                    let newer = self
                        .state
                        .committed_config
                        .as_ref()
                        .is_none_or(|k| newest.seqno > k.seqno);
                    if newer {
                        self.state.committed_config = Some(newest.clone());
                    }
                }
            }
        }
    }

    fn record(&mut self, r: &TraceRecord) {
        match &r.event {
            TraceEvent::Node { node, event } => match event {
                NodeEvent::Consensus(ev) => self.on_consensus(*node, ev),
                NodeEvent::Joined { snapshot: Some(at) } => {
                    self.state.nodes.entry(*node).or_default().base = *at;
                }
                _ => {}
            },
            TraceEvent::Outcome {
                node,
                outcome: Outcome::Status { txid, status },
                ..
            } => self.observe_status(*node, *txid, *status),
            TraceEvent::Reset => self.state = State::default(),
            _ => {}
        }
    }
}

pub fn check(trace: &[TraceRecord]) -> CheckReport {
    let mut c = Checker {
        state: State::default(),
        report: CheckReport {
            records: trace.len(),
            ..CheckReport::default()
        },
        index: 0,
    };
    for (i, r) in trace.iter().enumerate() {
        c.index = i;
        c.record(r);
    }
    c.report
}
