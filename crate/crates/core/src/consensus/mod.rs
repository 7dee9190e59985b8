//! Signature-anchored replication and primary election.
//!
//! [`Consensus`] is a pure state machine: callers feed it messages and clock
//! ticks, and drain [`Consensus::take_outbox`] and [`Consensus::take_events`].
//! Ledger contents reach the key-value store through a [`Replica`].

mod message;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::{Digest, KeyPair, Signature};
use crate::ledger::{EntryKind, Ledger, LedgerEntry, SignaturePayload, TransactionStatus};
use crate::types::{NodeId, Time, TransactionId, MILLIS};

pub use message::{Message, MessageBody};

/// Voter set introduced by the entry at `seqno`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Configuration {
    pub seqno: u64,
    pub nodes: BTreeSet<NodeId>,
}

impl Configuration {
    fn quorum(&self, yes: impl Fn(&NodeId) -> bool) -> bool {
        self.nodes.iter().filter(|n| yes(n)).count() * 2 > self.nodes.len()
    }
}

/// The state machine replicated by consensus.
pub trait Replica {
    /// Applies an appended entry. Returns the new voter set when the entry
    /// changes it.
    fn apply(&mut self, entry: &LedgerEntry) -> Option<BTreeSet<NodeId>>;
    /// Discards effects of entries after `seqno`.
    fn rollback(&mut self, seqno: u64);
    fn commit(&mut self, seqno: u64);
    /// Non-voting nodes that should still receive the ledger.
    fn learners(&self) -> BTreeSet<NodeId>;
    /// Service endorsement of this node's signing key, once trusted.
    fn endorsement(&self) -> Option<Signature>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusConfig {
    pub election_timeout_min: Time,
    pub election_timeout_max: Time,
    pub heartbeat: Time,
    /// A primary without acknowledgement from a quorum for this long steps down.
    pub liveness_window: Time,
    /// Unacknowledged entries are resent after this long.
    pub retransmit: Time,
    pub max_batch: usize,
    /// Emit a signature after this many unsigned entries.
    pub signature_interval: u64,
    /// Emit a signature once the oldest unsigned entry is this old.
    pub signature_max_delay: Time,
    /// Test hook: grant every vote request, breaking election safety.
    #[doc(hidden)]
    #[serde(default)]
    pub fault_vote_twice: bool,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        ConsensusConfig {
            election_timeout_min: 150 * MILLIS,
            election_timeout_max: 300 * MILLIS,
            heartbeat: 50 * MILLIS,
            liveness_window: 600 * MILLIS,
            retransmit: 100 * MILLIS,
            max_batch: 256,
            signature_interval: 100,
            signature_max_delay: 20 * MILLIS,
            fault_vote_twice: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Primary,
    Backup,
    Candidate,
}

/// Observable consensus decisions, for traces and invariant checking.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ConsensusEvent {
    Role {
        role: Role,
        view: u64,
    },
    Elected {
        view: u64,
        votes: BTreeSet<NodeId>,
        configs: Vec<Configuration>,
    },
    Voted {
        view: u64,
        candidate: NodeId,
    },
    Appended {
        txid: TransactionId,
        kind: EntryKind,
        root: Digest,
    },
    Truncated {
        to: u64,
    },
    Committed {
        txid: TransactionId,
        root: Digest,
        /// Acknowledging nodes, for commits decided by this node as primary.
        quorum: Option<BTreeSet<NodeId>>,
        configs: Vec<Configuration>,
    },
}

#[derive(Clone, Debug, Default)]
struct Progress {
    next: u64,
    matched: u64,
    last_ack: Time,
    last_sent: Time,
}

pub struct Consensus {
    id: NodeId,
    cfg: ConsensusConfig,
    key: KeyPair,
    view: u64,
    role: Role,
    voted_for: Option<NodeId>,
    primary: Option<NodeId>,
    ledger: Ledger,
    configs: Vec<Configuration>,
    votes: BTreeSet<NodeId>,
    peers: BTreeMap<NodeId, Progress>,
    election_deadline: Time,
    primary_since: Time,
    oldest_unsigned: Option<Time>,
    retired: bool,
    rng: ChaCha8Rng,
    outbox: Vec<Message>,
    events: Vec<ConsensusEvent>,
}

impl Consensus {
    pub fn new(
        id: NodeId,
        cfg: ConsensusConfig,
        key: KeyPair,
        ledger: Ledger,
        configs: Vec<Configuration>,
        seed: u64,
    ) -> Consensus {
        let view = ledger.last_txid().view;
        let mut c = Consensus {
            id,
            cfg,
            key,
            view,
            role: Role::Backup,
            voted_for: None,
            primary: None,
            ledger,
            configs,
            votes: BTreeSet::new(),
            peers: BTreeMap::new(),
            election_deadline: 0,
            primary_since: 0,
            oldest_unsigned: None,
            retired: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
            outbox: Vec::new(),
            events: Vec::new(),
        };
        c.reset_election_timer(0);
        c
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn view(&self) -> u64 {
        self.view
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn is_primary(&self) -> bool {
        self.role == Role::Primary
    }

    /// Last known primary of the current view.
    pub fn primary(&self) -> Option<NodeId> {
        match self.role {
            Role::Primary => Some(self.id),
            _ => self.primary,
        }
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn commit_seqno(&self) -> u64 {
        self.ledger.commit_seqno()
    }

    pub fn configs(&self) -> &[Configuration] {
        &self.configs
    }

    pub fn config(&self) -> &ConsensusConfig {
        &self.cfg
    }

    pub fn set_signature_interval(&mut self, interval: u64) {
        self.cfg.signature_interval = interval.max(1);
    }

    pub fn status(&self, txid: &TransactionId) -> TransactionStatus {
        self.ledger.status(txid)
    }

    pub fn take_outbox(&mut self) -> Vec<Message> {
        std::mem::take(&mut self.outbox)
    }

    pub fn take_events(&mut self) -> Vec<ConsensusEvent> {
        std::mem::take(&mut self.events)
    }

    /// Voters of every active configuration.
    pub fn voters(&self) -> BTreeSet<NodeId> {
        self.configs.iter().flat_map(|c| c.nodes.iter().copied()).collect()
    }

    /// Stops all participation.
    pub fn retire(&mut self) {
        self.retired = true;
        self.role = Role::Backup;
        self.events.push(ConsensusEvent::Role {
            role: Role::Backup,
            view: self.view,
        });
    }

    pub fn is_retired(&self) -> bool {
        self.retired
    }

    /// Whether this node may start an election: it is a voter in the newest
    /// configuration and holds a signature after the entry that added it.
    pub fn can_stand(&self) -> bool {
        let Some(newest) = self.configs.last() else {
            return false;
        };
        if self.retired || !newest.nodes.contains(&self.id) {
            return false;
        }
        let mut since = newest.seqno;
        for c in self.configs.iter().rev() {
            if !c.nodes.contains(&self.id) {
                break;
            }
            since = c.seqno;
        }
        self.ledger.last_signature().seqno >= since
    }

    fn send(&mut self, to: NodeId, body: MessageBody) {
        self.outbox.push(Message {
            from: self.id,
            to,
            body,
        });
    }

    fn reset_election_timer(&mut self, now: Time) {
        let lo = self.cfg.election_timeout_min;
        let hi = self.cfg.election_timeout_max.max(lo + 1);
        self.election_deadline = now + self.rng.gen_range(lo..hi);
    }

    fn set_role(&mut self, role: Role) {
        if self.role != role {
            self.role = role;
            self.events.push(ConsensusEvent::Role { role, view: self.view });
        }
    }

    /// Adopts a higher view as a backup.
    fn adopt_view(&mut self, view: u64, now: Time) {
        if view > self.view {
            self.view = view;
            self.voted_for = None;
            self.primary = None;
            self.votes.clear();
            self.role = Role::Backup;
            self.events.push(ConsensusEvent::Role {
                role: Role::Backup,
                view,
            });
            self.reset_election_timer(now);
        }
    }

    fn append_entry(&mut self, entry: LedgerEntry, replica: &mut dyn Replica) {
        let txid = entry.txid;
        let kind = entry.kind;
        let changed = replica.apply(&entry);
        self.ledger.append(entry).expect("entries arrive in sequence");
        if let Some(nodes) = changed {
            self.configs.push(Configuration {
                seqno: txid.seqno,
                nodes,
            });
        }
        self.events.push(ConsensusEvent::Appended {
            txid,
            kind,
            root: self.ledger.pending_root(),
        });
    }

    fn truncate(&mut self, to: u64, replica: &mut dyn Replica) {
        if to >= self.ledger.last_seqno() {
            return;
        }
        self.ledger.truncate(to).expect("never truncates committed entries");
        replica.rollback(to);
        while self.configs.len() > 1 && self.configs.last().is_some_and(|c| c.seqno > to) {
            self.configs.pop();
        }
        if self.configs.last().is_some_and(|c| c.seqno > to) {
            self.configs.clear();
        }
        self.oldest_unsigned = None;
        self.events.push(ConsensusEvent::Truncated { to });
    }

    fn advance_commit(&mut self, seqno: u64, quorum: Option<BTreeSet<NodeId>>, replica: &mut dyn Replica) {
        if seqno <= self.ledger.commit_seqno() {
            return;
        }
        let configs = self.configs.clone();
        self.ledger.set_commit(seqno);
        replica.commit(seqno);
        let keep = self.configs.iter().rposition(|c| c.seqno <= seqno).unwrap_or(0);
        self.configs.drain(..keep);
        let txid = TransactionId::new(self.ledger.view_at(seqno).expect("committed entry is held"), seqno);
        let root = self.ledger.merkle().root_at(seqno).expect("root of a held prefix");
        self.events.push(ConsensusEvent::Committed {
            txid,
            root,
            quorum,
            configs,
        });
    }

    /// Number of entries after the last signature.
    pub fn unsigned(&self) -> u64 {
        self.ledger.last_seqno() - self.ledger.last_signature().seqno.max(self.ledger.base().seqno)
    }

    /// Loads entries already agreed out of band, such as genesis, and marks
    /// them committed.
    pub fn bootstrap(&mut self, entries: Vec<LedgerEntry>, replica: &mut dyn Replica) {
        for e in entries {
            self.view = self.view.max(e.txid.view);
            self.append_entry(e, replica);
        }
        let last = self.ledger.last_signature().seqno;
        self.advance_commit(last, None, replica);
    }

    /// Takes the primary role in the current view without an election.
    pub fn assume_primary(&mut self, now: Time) {
        self.voted_for = Some(self.id);
        self.become_primary_state(now);
    }

    /// Opens `view` as its primary, for a node restarting the service alone.
    pub fn start_view(&mut self, view: u64, now: Time) {
        self.view = self.view.max(view);
        self.assume_primary(now);
    }

    fn become_primary_state(&mut self, now: Time) {
        self.set_role(Role::Primary);
        self.primary = Some(self.id);
        self.primary_since = now;
        self.peers.clear();
        let next = self.ledger.last_seqno() + 1;
        for p in self.targets() {
            self.peers.insert(
                p,
                Progress {
                    next,
                    matched: 0,
                    last_ack: now,
                    last_sent: 0,
                },
            );
        }
    }

    fn targets(&self) -> BTreeSet<NodeId> {
        let mut t = self.voters();
        t.remove(&self.id);
        t
    }

    /// Next transaction id the primary will assign.
    pub fn next_txid(&self) -> TransactionId {
        TransactionId::new(self.view, self.ledger.last_seqno() + 1)
    }

    /// Appends a locally executed entry as primary.
    pub fn append_local(&mut self, entry: LedgerEntry, now: Time, replica: &mut dyn Replica) {
        assert!(self.is_primary(), "only the primary appends");
        assert_eq!(entry.txid, self.next_txid());
        let kind = entry.kind;
        self.append_entry(entry, replica);
        if kind == EntryKind::Signature {
            self.oldest_unsigned = None;
        } else {
            self.oldest_unsigned.get_or_insert(now);
            if self.unsigned() >= self.cfg.signature_interval {
                self.sign(now, replica);
            }
        }
    }

    /// Appends a signature entry over the current ledger as primary.
    pub fn sign(&mut self, now: Time, replica: &mut dyn Replica) -> bool {
        let Some(endorsement) = replica.endorsement() else {
            return false;
        };
        let at = self.next_txid();
        let mut history = self.ledger.view_history().to_vec();
        if history.last().is_none_or(|(v, _)| *v < at.view) {
            history.push((at.view, at.seqno));
        }
        let payload =
            SignaturePayload::create(at, self.id, &self.key, endorsement, self.ledger.pending_root(), history);
        self.append_local(LedgerEntry::signature(at, &payload), now, replica);
        self.replicate(now, false);
        self.try_commit(replica);
        true
    }

    /// Drives timers: elections, heartbeats, retransmission, time-based
    /// signatures and the primary liveness check.
    pub fn tick(&mut self, now: Time, replica: &mut dyn Replica) {
        if self.retired {
            return;
        }
        match self.role {
            Role::Primary => {
                if self
                    .oldest_unsigned
                    .is_some_and(|t| now >= t + self.cfg.signature_max_delay)
                {
                    self.sign(now, replica);
                }
                self.refresh_peers(now, replica);
                self.replicate(now, true);
                self.try_commit(replica);
                self.check_liveness(now);
            }
            Role::Backup | Role::Candidate => {
                if now >= self.election_deadline {
                    if self.can_stand() {
                        self.start_election(now, replica);
                    } else {
                        self.reset_election_timer(now);
                    }
                }
            }
        }
    }

    fn refresh_peers(&mut self, now: Time, replica: &dyn Replica) {
        let next = self.ledger.last_seqno() + 1;
        let mut targets = self.targets();
        targets.extend(replica.learners());
        targets.remove(&self.id);
        for p in targets {
            self.peers.entry(p).or_insert(Progress {
                next,
                matched: 0,
                last_ack: now,
                last_sent: 0,
            });
        }
        for p in self.peers.values_mut() {
            if p.next > p.matched + 1
                && now >= p.last_ack + self.cfg.retransmit
                && now >= p.last_sent + self.cfg.retransmit
            {
                p.next = p.matched + 1;
            }
        }
    }

    fn check_liveness(&mut self, now: Time) {
        if now < self.primary_since + self.cfg.liveness_window {
            return;
        }
        let window = self.cfg.liveness_window;
        let alive = |n: &NodeId| *n == self.id || self.peers.get(n).is_some_and(|p| now < p.last_ack + window);
        if !self.configs.iter().all(|c| c.quorum(alive)) {
            self.set_role(Role::Backup);
            self.primary = None;
            self.reset_election_timer(now);
        }
    }

    /// Sends pending entries to every target; with `heartbeat`, also to
    /// targets that have heard nothing for a heartbeat interval.
    pub fn replicate(&mut self, now: Time, heartbeat: bool) {
        if !self.is_primary() {
            return;
        }
        let last = self.ledger.last_seqno();
        let base = self.ledger.base().seqno;
        let ids: Vec<NodeId> = self.peers.keys().copied().collect();
        for id in ids {
            let p = &self.peers[&id];
            let pending = p.next <= last;
            if !pending && !(heartbeat && now >= p.last_sent + self.cfg.heartbeat) {
                continue;
            }
            let next = p.next.max(base + 1);
            let prev_seqno = next - 1;
            let Some(prev_view) = self.ledger.view_at(prev_seqno) else {
                continue;
            };
            let to = (next + self.cfg.max_batch as u64 - 1).min(last);
            let entries = self.ledger.range(next, to).to_vec();
            let sent_to = prev_seqno + entries.len() as u64;
            let p = self.peers.get_mut(&id).expect("peer present");
            p.next = sent_to + 1;
            p.last_sent = now;
            let body = MessageBody::AppendEntries {
                view: self.view,
                prev: TransactionId::new(prev_view, prev_seqno),
                entries,
                commit: self.ledger.commit_seqno(),
            };
            self.send(id, body);
        }
    }

    fn try_commit(&mut self, replica: &mut dyn Replica) {
        if !self.is_primary() {
            return;
        }
        let commit = self.ledger.commit_seqno();
        let last = self.ledger.last_seqno();
        let candidates: Vec<TransactionId> = self
            .ledger
            .signatures()
            .iter()
            .rev()
            .take_while(|t| t.seqno > commit)
            .filter(|t| t.view == self.view)
            .copied()
            .collect();
        for sig in candidates {
            let acked = |n: &NodeId| {
                if *n == self.id {
                    last >= sig.seqno
                } else {
                    self.peers.get(n).is_some_and(|p| p.matched >= sig.seqno)
                }
            };
            if self.configs.iter().all(|c| c.quorum(acked)) {
                let quorum = self.voters().into_iter().filter(|n| acked(n)).collect();
                self.advance_commit(sig.seqno, Some(quorum), replica);
                self.after_commit();
                return;
            }
        }
    }

    fn after_commit(&mut self) {
        // a primary outside the committed configuration hands over
        if self.is_primary() && self.configs.len() == 1 && !self.configs[0].nodes.contains(&self.id) {
            self.set_role(Role::Backup);
            self.primary = None;
        }
    }

    fn start_election(&mut self, now: Time, replica: &mut dyn Replica) {
        self.view += 1;
        self.voted_for = Some(self.id);
        self.primary = None;
        self.votes = BTreeSet::from([self.id]);
        self.role = Role::Candidate;
        self.events.push(ConsensusEvent::Role {
            role: Role::Candidate,
            view: self.view,
        });
        self.events.push(ConsensusEvent::Voted {
            view: self.view,
            candidate: self.id,
        });
        self.reset_election_timer(now);
        let last_signature = self.ledger.last_signature();
        for p in self.targets() {
            self.send(
                p,
                MessageBody::RequestVote {
                    view: self.view,
                    last_signature,
                },
            );
        }
        self.check_election(now, replica);
    }

    fn check_election(&mut self, now: Time, replica: &mut dyn Replica) {
        if self.role != Role::Candidate || !self.configs.iter().all(|c| c.quorum(|n| self.votes.contains(n))) {
            return;
        }
        let votes = self.votes.clone();
        let sig = self.ledger.last_signature().seqno;
        self.truncate(sig, replica);
        self.events.push(ConsensusEvent::Elected {
            view: self.view,
            votes,
            configs: self.configs.clone(),
        });
        self.become_primary_state(now);
        if !self.sign(now, replica) {
            self.set_role(Role::Backup);
        }
    }

    /// Whether a candidate whose last signature is `theirs` is at least as
    /// up to date as this node.
    pub fn would_vote_for(&self, theirs: TransactionId) -> bool {
        theirs >= self.ledger.last_signature()
    }

    pub fn handle(&mut self, msg: Message, now: Time, replica: &mut dyn Replica) {
        if self.retired {
            return;
        }
        let from = msg.from;
        match msg.body {
            MessageBody::AppendEntries {
                view,
                prev,
                entries,
                commit,
            } => self.on_append_entries(from, view, prev, entries, commit, now, replica),
            MessageBody::AppendEntriesResponse {
                view,
                success,
                last_seqno,
            } => self.on_append_response(from, view, success, last_seqno, now, replica),
            MessageBody::RequestVote { view, last_signature } => self.on_request_vote(from, view, last_signature, now),
            MessageBody::RequestVoteResponse { view, granted } => {
                self.on_vote_response(from, view, granted, now, replica)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn on_append_entries(
        &mut self,
        from: NodeId,
        view: u64,
        prev: TransactionId,
        entries: Vec<LedgerEntry>,
        commit: u64,
        now: Time,
        replica: &mut dyn Replica,
    ) {
        if view < self.view {
            let body = MessageBody::AppendEntriesResponse {
                view: self.view,
                success: false,
                last_seqno: self.ledger.commit_seqno(),
            };
            self.send(from, body);
            return;
        }
        self.adopt_view(view, now);
        if self.role != Role::Backup {
            self.set_role(Role::Backup);
        }
        self.primary = Some(from);
        self.reset_election_timer(now);

        if !self.ledger.matches(&prev) {
            let bound = if prev.seqno > self.ledger.last_seqno() {
                self.ledger.last_seqno()
            } else {
                prev.seqno.saturating_sub(1)
            };
            let hint = self
                .ledger
                .last_signature_at_or_below(bound)
                .seqno
                .max(self.ledger.commit_seqno());
            let body = MessageBody::AppendEntriesResponse {
                view: self.view,
                success: false,
                last_seqno: hint,
            };
            self.send(from, body);
            return;
        }
        let matched = prev.seqno + entries.len() as u64;
        for e in entries {
            let s = e.txid.seqno;
            if s <= self.ledger.base().seqno {
                continue;
            }
            if s <= self.ledger.last_seqno() {
                if self.ledger.view_at(s) == Some(e.txid.view) {
                    continue;
                }
                if s <= self.ledger.commit_seqno() {
                    // only reachable when safety is already broken; report and refuse
                    self.events.push(ConsensusEvent::Truncated { to: s - 1 });
                    let body = MessageBody::AppendEntriesResponse {
                        view: self.view,
                        success: false,
                        last_seqno: self.ledger.commit_seqno(),
                    };
                    self.send(from, body);
                    return;
                }
                self.truncate(s - 1, replica);
            }
            self.append_entry(e, replica);
        }
        let target = self.ledger.last_signature_at_or_below(commit.min(matched)).seqno;
        self.advance_commit(target, None, replica);
        let body = MessageBody::AppendEntriesResponse {
            view: self.view,
            success: true,
            last_seqno: matched,
        };
        self.send(from, body);
    }

    fn on_append_response(
        &mut self,
        from: NodeId,
        view: u64,
        success: bool,
        last_seqno: u64,
        now: Time,
        replica: &mut dyn Replica,
    ) {
        if view > self.view {
            self.adopt_view(view, now);
            return;
        }
        if view < self.view || !self.is_primary() {
            return;
        }
        let base = self.ledger.base().seqno;
        let Some(p) = self.peers.get_mut(&from) else {
            return;
        };
        p.last_ack = now;
        if success {
            p.matched = p.matched.max(last_seqno);
            p.next = p.next.max(p.matched + 1);
            self.try_commit(replica);
        } else {
            p.next = (last_seqno + 1).max(p.matched + 1).max(base + 1);
            p.last_sent = 0;
            self.replicate(now, false);
        }
    }

    fn on_request_vote(&mut self, from: NodeId, view: u64, last_signature: TransactionId, now: Time) {
        if view < self.view {
            let body = MessageBody::RequestVoteResponse {
                view: self.view,
                granted: false,
            };
            self.send(from, body);
            return;
        }
        self.adopt_view(view, now);
        let free = self.voted_for.is_none() || self.voted_for == Some(from) || self.cfg.fault_vote_twice;
        let granted = free && self.would_vote_for(last_signature);
        if granted {
            self.voted_for = Some(from);
            self.reset_election_timer(now);
            self.events.push(ConsensusEvent::Voted { view, candidate: from });
        }
        self.send(from, MessageBody::RequestVoteResponse { view, granted });
    }

    fn on_vote_response(&mut self, from: NodeId, view: u64, granted: bool, now: Time, replica: &mut dyn Replica) {
        if view > self.view {
            self.adopt_view(view, now);
            return;
        }
        if view < self.view || self.role != Role::Candidate || !granted {
            return;
        }
        self.votes.insert(from);
        self.check_election(now, replica);
    }
}

#[cfg(test)]
mod tests;
