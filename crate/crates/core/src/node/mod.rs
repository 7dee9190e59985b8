//! A service node: consensus, the replicated store, the message-log
//! application, governance, joining, snapshots and disaster recovery.

mod genesis;
mod recover;
mod state;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::{Configuration, Consensus, ConsensusConfig, ConsensusEvent, Message, MessageBody, Role};
use crate::crypto::{Digest, KeyPair, PublicId, SymmetricSecret};
use crate::governance::{
    code_allowed, node_info, node_key, nodes, process_request, service_info, trusted_nodes, ActionContext, NodeInfo,
    NodeStatus, ProposalStatus, ServiceStatus, SignedRequest,
};
use crate::kvstore::{maps, Access, KvRead, Snapshot, Store, WriteSet};
use crate::ledger::{write_chunks, EntryKind, Ledger, LedgerEntry, TransactionStatus};
use crate::merkle::Receipt;
use crate::recovery::{ShareCollector, ShareFile};
use crate::types::{NodeId, Time, TransactionId};

pub use genesis::{Genesis, GenesisMember};
use state::NodeState;

/// Private map holding the application's messages.
pub const APP_MESSAGES: &str = "app.msgs";
const SNAPSHOT_KEY: &str = "snapshot";
const JOIN_RETRY: Time = 200 * crate::types::MILLIS;

#[derive(Clone, Debug)]
pub struct NodeSetup {
    pub id: NodeId,
    pub key: KeyPair,
    pub code_id: String,
    pub consensus: ConsensusConfig,
    /// Committed entries between snapshots; zero disables them.
    pub snapshot_interval: u64,
    pub seed: u64,
}

/// What a joining node receives once admitted.
#[derive(Clone)]
pub struct JoinGrant {
    pub service_key: KeyPair,
    pub ledger_secret: SymmetricSecret,
    pub snapshot: Option<Vec<u8>>,
}

#[derive(Clone)]
pub enum Payload {
    Consensus(MessageBody),
    JoinRequest { public_id: PublicId, code_id: String },
    JoinGranted(Box<JoinGrant>),
    JoinRejected(String),
    JoinRedirect(Option<NodeId>),
}

#[derive(Clone)]
pub struct Packet {
    pub from: NodeId,
    pub to: NodeId,
    pub payload: Payload,
}

impl Packet {
    /// Ledger entries carried, for cost accounting.
    pub fn entries(&self) -> usize {
        match &self.payload {
            Payload::Consensus(b) => b.entry_count(),
            _ => 0,
        }
    }

    pub fn kind(&self) -> &'static str {
        match &self.payload {
            Payload::Consensus(b) => b.kind(),
            Payload::JoinRequest { .. } => "join_request",
            Payload::JoinGranted(_) => "join_granted",
            Payload::JoinRejected(_) => "join_rejected",
            Payload::JoinRedirect(_) => "join_redirect",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Request {
    WriteMessage { id: u64, msg: String },
    ReadMessage { id: u64 },
    Status { txid: TransactionId },
    Receipt { seqno: u64 },
    Governance(SignedRequest),
    SubmitShare(ShareFile),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Response {
    Written {
        txid: TransactionId,
    },
    Message {
        value: Option<String>,
        read_at: TransactionId,
    },
    Status {
        status: TransactionStatus,
    },
    Receipt(Box<Receipt>),
    Governance {
        proposal_id: Digest,
        status: ProposalStatus,
        txid: Option<TransactionId>,
    },
    ShareAccepted {
        have: usize,
        need: usize,
    },
    Recovered {
        txid: TransactionId,
    },
    NotPrimary {
        primary: Option<NodeId>,
    },
    Unavailable(String),
    Error(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeEvent {
    Consensus(ConsensusEvent),
    Joined { snapshot: Option<u64> },
    JoinRejected { reason: String },
    Snapshot { seqno: u64 },
    Stopped,
    Recovery { status: ServiceStatus },
}

struct PendingSnapshot {
    snapshot: Snapshot,
    evidence: TransactionId,
}

fn zero_secret() -> SymmetricSecret {
    SymmetricSecret([0; 32])
}

pub struct Node {
    id: NodeId,
    key: KeyPair,
    code_id: String,
    consensus_cfg: ConsensusConfig,
    consensus: Consensus,
    state: NodeState,
    service_key: Option<KeyPair>,
    rng: ChaCha8Rng,
    seed: u64,
    snapshot_interval: u64,
    last_snapshot: u64,
    pending_snapshot: Option<PendingSnapshot>,
    snapshot: Option<Vec<u8>>,
    joined: bool,
    join_target: Option<NodeId>,
    last_join_request: Time,
    stopped: bool,
    shares: Option<ShareCollector>,
    outbox: Vec<Packet>,
    events: Vec<NodeEvent>,
}

impl Node {
    fn blank(setup: NodeSetup, ledger: Ledger, configs: Vec<Configuration>, store: Store) -> Node {
        let consensus = Consensus::new(
            setup.id,
            setup.consensus.clone(),
            setup.key.clone(),
            ledger,
            configs,
            setup.seed,
        );
        Node {
            id: setup.id,
            key: setup.key,
            code_id: setup.code_id,
            consensus_cfg: setup.consensus,
            consensus,
            state: NodeState {
                id: setup.id,
                store,
                secret: None,
            },
            service_key: None,
            rng: ChaCha8Rng::seed_from_u64(setup.seed ^ 0x5eed),
            seed: setup.seed,
            snapshot_interval: setup.snapshot_interval,
            last_snapshot: 0,
            pending_snapshot: None,
            snapshot: None,
            joined: false,
            join_target: None,
            last_join_request: 0,
            stopped: false,
            shares: None,
            outbox: Vec::new(),
            events: Vec::new(),
        }
    }

    /// A node of the initial configuration, loaded with the genesis entries.
    pub fn from_genesis(setup: NodeSetup, genesis: &Genesis, entries: Vec<LedgerEntry>) -> Node {
        let mut node = Node::blank(setup, Ledger::new(), Vec::new(), Store::new());
        node.state.secret = Some(genesis.ledger_secret.clone());
        node.service_key = Some(genesis.service_key.clone());
        node.joined = true;
        node.consensus.bootstrap(entries, &mut node.state);
        node.drain_consensus();
        node
    }

    /// A node that has not yet been admitted; see [`Node::request_join`].
    pub fn joining(setup: NodeSetup) -> Node {
        Node::blank(setup, Ledger::new(), Vec::new(), Store::new())
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn public_id(&self) -> PublicId {
        self.key.public_id()
    }

    pub fn code_id(&self) -> &str {
        &self.code_id
    }

    pub fn consensus(&self) -> &Consensus {
        &self.consensus
    }

    pub fn ledger(&self) -> &Ledger {
        self.consensus.ledger()
    }

    pub fn store(&self) -> &Store {
        &self.state.store
    }

    pub fn role(&self) -> Role {
        self.consensus.role()
    }

    pub fn is_primary(&self) -> bool {
        !self.stopped && self.consensus.is_primary()
    }

    pub fn primary(&self) -> Option<NodeId> {
        self.consensus.primary()
    }

    pub fn view(&self) -> u64 {
        self.consensus.view()
    }

    pub fn commit_seqno(&self) -> u64 {
        self.consensus.commit_seqno()
    }

    pub fn is_joined(&self) -> bool {
        self.joined
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped
    }

    pub fn service_identity(&self) -> Option<PublicId> {
        service_info(&self.state.store).map(|i| i.identity)
    }

    pub fn service_status(&self) -> Option<ServiceStatus> {
        service_info(&self.state.store).map(|i| i.status)
    }

    pub fn ledger_secret(&self) -> Option<&SymmetricSecret> {
        self.state.secret.as_ref()
    }

    pub fn latest_snapshot(&self) -> Option<&[u8]> {
        self.snapshot.as_deref()
    }

    pub fn set_signature_interval(&mut self, interval: u64) {
        self.consensus.set_signature_interval(interval);
        self.consensus_cfg.signature_interval = interval.max(1);
    }

    pub fn take_outbox(&mut self) -> Vec<Packet> {
        std::mem::take(&mut self.outbox)
    }

    pub fn take_events(&mut self) -> Vec<NodeEvent> {
        std::mem::take(&mut self.events)
    }

    fn drain_consensus(&mut self) {
        for m in self.consensus.take_outbox() {
            let Message { from, to, body } = m;
            self.outbox.push(Packet {
                from,
                to,
                payload: Payload::Consensus(body),
            });
        }
        self.events
            .extend(self.consensus.take_events().into_iter().map(NodeEvent::Consensus));
    }

    /// Committed ledger chunk files, as `(file name, bytes)`.
    pub fn ledger_files(&self) -> Vec<(String, Vec<u8>)> {
        self.ledger()
            .chunks(self.commit_seqno())
            .into_iter()
            .map(|c| (c.file_name(), c.bytes))
            .collect()
    }

    pub fn write_ledger(&self, dir: &Path) -> std::io::Result<()> {
        write_chunks(dir, &self.ledger().chunks(self.commit_seqno()))
    }

    /// Asks `to` for admission; the request is repeated on ticks and follows
    /// redirects until granted.
    pub fn request_join(&mut self, to: NodeId, now: Time) {
        if self.joined || self.stopped {
            return;
        }
        self.join_target = Some(to);
        self.last_join_request = now;
        self.outbox.push(Packet {
            from: self.id,
            to,
            payload: Payload::JoinRequest {
                public_id: self.key.public_id(),
                code_id: self.code_id.clone(),
            },
        });
    }

    /// Appends a transaction as primary and starts replicating it.
    fn append(&mut self, kind: EntryKind, ws: &WriteSet, claims: Option<Digest>, now: Time) -> TransactionId {
        let txid = self.consensus.next_txid();
        let secret = self.state.secret.clone().unwrap_or_else(zero_secret);
        debug_assert!(self.state.secret.is_some() || ws.split().1.is_empty());
        let entry = LedgerEntry::seal(kind, txid, ws, claims, &secret);
        self.consensus.append_local(entry, now, &mut self.state);
        self.consensus.replicate(now, false);
        self.drain_consensus();
        txid
    }

    pub fn handle_packet(&mut self, packet: Packet, now: Time) {
        if self.stopped {
            return;
        }
        let from = packet.from;
        match packet.payload {
            Payload::Consensus(body) => {
                if self.joined {
                    let msg = Message {
                        from,
                        to: self.id,
                        body,
                    };
                    self.consensus.handle(msg, now, &mut self.state);
                }
            }
            Payload::JoinRequest { public_id, code_id } => self.on_join_request(from, public_id, code_id, now),
            Payload::JoinGranted(grant) => self.on_join_granted(*grant),
            Payload::JoinRejected(reason) => {
                self.join_target = None;
                self.events.push(NodeEvent::JoinRejected { reason });
            }
            Payload::JoinRedirect(to) => {
                if let Some(to) = to.filter(|t| *t != self.id) {
                    self.request_join(to, now);
                }
            }
        }
        self.drain_consensus();
    }

    fn reply(&mut self, to: NodeId, payload: Payload) {
        self.outbox.push(Packet {
            from: self.id,
            to,
            payload,
        });
    }

    fn on_join_request(&mut self, from: NodeId, public_id: PublicId, code_id: String, now: Time) {
        if !self.is_primary() {
            self.reply(from, Payload::JoinRedirect(self.primary()));
            return;
        }
        let (Some(service_key), Some(secret)) = (self.service_key.clone(), self.state.secret.clone()) else {
            self.reply(from, Payload::JoinRejected("service is recovering".into()));
            return;
        };
        if !code_allowed(&self.state.store, &code_id) {
            self.reply(
                from,
                Payload::JoinRejected(format!("code id {code_id} is not allowed to join")),
            );
            return;
        }
        match node_info(&self.state.store, from) {
            Some(info) if info.public_id != public_id => {
                self.reply(
                    from,
                    Payload::JoinRejected(format!("{from} is registered with another key")),
                );
                return;
            }
            Some(info) if info.status != NodeStatus::Pending => {
                self.reply(
                    from,
                    Payload::JoinRejected(format!(
                        "{from} is already {:?}; rejoin under a fresh identity",
                        info.status
                    )),
                );
                return;
            }
            Some(_) => {}
            None => {
                let mut tx = self.state.store.tx(Access::Framework);
                let info = NodeInfo {
                    public_id,
                    code_id,
                    status: NodeStatus::Pending,
                    endorsement: None,
                };
                tx.put_json(maps::NODES_INFO, &node_key(from), &info)
                    .expect("framework write");
                let ws = tx.into_write_set();
                self.append(EntryKind::Reconfiguration, &ws, None, now);
            }
        }
        let grant = JoinGrant {
            service_key,
            ledger_secret: secret,
            snapshot: self.snapshot.clone(),
        };
        self.reply(from, Payload::JoinGranted(Box::new(grant)));
    }

    fn on_join_granted(&mut self, grant: JoinGrant) {
        if self.joined {
            return;
        }
        let mut from_snapshot = None;
        if let Some(bytes) = &grant.snapshot {
            match Snapshot::from_bytes(bytes, &grant.service_key.public_id(), &grant.ledger_secret) {
                Ok(snap) => {
                    let at = snap.txid;
                    if let Some(ledger) = Ledger::from_snapshot(at, &snap.frontier, snap.view_history.clone()) {
                        let store = snap.into_store();
                        let configs = vec![Configuration {
                            seqno: at.seqno,
                            nodes: trusted_nodes(&store),
                        }];
                        self.consensus = Consensus::new(
                            self.id,
                            self.consensus_cfg.clone(),
                            self.key.clone(),
                            ledger,
                            configs,
                            self.seed,
                        );
                        self.state.store = store;
                        self.last_snapshot = at.seqno;
                        from_snapshot = Some(at.seqno);
                    }
                }
                Err(e) => {
                    self.events.push(NodeEvent::JoinRejected {
                        reason: format!("snapshot rejected: {e}"),
                    });
                    return;
                }
            }
        }
        self.state.secret = Some(grant.ledger_secret);
        self.service_key = Some(grant.service_key);
        self.joined = true;
        self.events.push(NodeEvent::Joined {
            snapshot: from_snapshot,
        });
    }

    /// Takes the lead of a freshly bootstrapped service.
    pub fn start_as_primary(&mut self, now: Time) {
        self.consensus.assume_primary(now);
        self.drain_consensus();
    }

    pub fn tick(&mut self, now: Time) {
        if self.stopped {
            return;
        }
        if !self.joined {
            if let Some(to) = self.join_target {
                if now >= self.last_join_request + JOIN_RETRY {
                    self.request_join(to, now);
                }
            }
        } else {
            self.consensus.tick(now, &mut self.state);
            self.drain_consensus();
            if self.is_primary() {
                self.drive_retirement(now);
                self.drive_snapshot(now);
            }
            self.finish_snapshot();
            self.check_shutdown();
        }
    }

    fn committed_version(&self, map: &str, key: &str) -> Option<u64> {
        self.state
            .store
            .get_versioned(map, key.as_bytes())
            .map(|v| v.version)
            .filter(|v| *v <= self.commit_seqno())
    }

    /// Marks nodes whose retirement has committed as retired.
    fn drive_retirement(&mut self, now: Time) {
        if self.consensus.configs().len() > 1 {
            return;
        }
        let retiring = nodes(&self.state.store).into_iter().find(|(id, info)| {
            info.status == NodeStatus::Retiring && self.committed_version(maps::NODES_INFO, &node_key(*id)).is_some()
        });
        if let Some((id, mut info)) = retiring {
            info.status = NodeStatus::Retired;
            let mut tx = self.state.store.tx(Access::Framework);
            tx.put_json(maps::NODES_INFO, &node_key(id), &info)
                .expect("framework write");
            let ws = tx.into_write_set();
            self.append(EntryKind::Reconfiguration, &ws, None, now);
        }
    }

    fn check_shutdown(&mut self) {
        let retired = node_info(&self.state.store, self.id).is_some_and(|i| i.status == NodeStatus::Retired)
            && self.committed_version(maps::NODES_INFO, &node_key(self.id)).is_some();
        if retired {
            self.consensus.retire();
            self.drain_consensus();
            self.stopped = true;
            self.events.push(NodeEvent::Stopped);
        }
    }

    fn drive_snapshot(&mut self, now: Time) {
        let commit = self.commit_seqno();
        if self.snapshot_interval == 0
            || self.pending_snapshot.is_some()
            || commit < self.last_snapshot + self.snapshot_interval
        {
            return;
        }
        let Some(secret) = self.state.secret.clone() else {
            return;
        };
        let Ok(store) = self.state.store.at(commit) else {
            return;
        };
        let Ok(frontier) = self.ledger().merkle().frontier_at(commit) else {
            return;
        };
        let snapshot = Snapshot::capture(&store, frontier, self.ledger().view_history_upto(commit));
        let digest = snapshot.body_digest(&secret);
        let mut ws = WriteSet::new();
        let evidence = serde_json::json!({ "seqno": commit, "digest": digest });
        ws.put(
            maps::SNAPSHOT_EVIDENCE,
            SNAPSHOT_KEY.as_bytes().to_vec(),
            evidence.to_string().into_bytes(),
        );
        let evidence = self.append(EntryKind::User, &ws, Some(digest), now);
        self.last_snapshot = commit;
        self.pending_snapshot = Some(PendingSnapshot { snapshot, evidence });
    }

    fn finish_snapshot(&mut self) {
        let Some(p) = &self.pending_snapshot else {
            return;
        };
        if !self.ledger().matches(&p.evidence) && p.evidence.seqno <= self.ledger().last_seqno() {
            self.pending_snapshot = None;
            return;
        }
        if self.commit_seqno() < p.evidence.seqno {
            return;
        }
        let receipt = self.ledger().receipt(p.evidence.seqno);
        let mut p = self.pending_snapshot.take().expect("checked above");
        let (Some(receipt), Some(secret)) = (receipt, self.state.secret.as_ref()) else {
            return;
        };
        p.snapshot.receipt = Some(receipt);
        self.snapshot = Some(p.snapshot.to_bytes(secret));
        self.events.push(NodeEvent::Snapshot {
            seqno: p.snapshot.txid.seqno,
        });
    }

    pub fn handle_request(&mut self, request: Request, now: Time) -> Response {
        if self.stopped || !self.joined {
            return Response::Unavailable("node is not serving".into());
        }
        match request {
            Request::WriteMessage { id, msg } => {
                if !self.is_primary() {
                    return Response::NotPrimary {
                        primary: self.primary(),
                    };
                }
                if self.service_status() != Some(ServiceStatus::Open) {
                    return Response::Unavailable("service is not open".into());
                }
                let mut tx = self.state.store.tx(Access::Application);
                if let Err(e) = tx.put(APP_MESSAGES, id.to_string().into_bytes(), msg.into_bytes()) {
                    return Response::Error(e.to_string());
                }
                let ws = tx.into_write_set();
                let txid = self.append(EntryKind::User, &ws, None, now);
                Response::Written { txid }
            }
            Request::ReadMessage { id } => Response::Message {
                value: self
                    .state
                    .store
                    .read(APP_MESSAGES, id.to_string().as_bytes())
                    .map(|v| String::from_utf8_lossy(&v).into_owned()),
                read_at: self.state.store.applied(),
            },
            Request::Status { txid } => Response::Status {
                status: self.consensus.status(&txid),
            },
            Request::Receipt { seqno } => {
                if seqno == 0 || seqno > self.commit_seqno() {
                    return Response::Unavailable(format!("{seqno} is not committed"));
                }
                match self.ledger().receipt(seqno) {
                    Some(r) => Response::Receipt(Box::new(r)),
                    None => Response::Unavailable(format!("no receipt held for {seqno}")),
                }
            }
            Request::Governance(signed) => self.governance(signed, now),
            Request::SubmitShare(file) => self.submit_share(file, now),
        }
    }

    fn governance(&mut self, signed: SignedRequest, now: Time) -> Response {
        if !self.is_primary() {
            return Response::NotPrimary {
                primary: self.primary(),
            };
        }
        let pending = self.consensus.configs().len() > 1;
        let mut tx = self.state.store.tx(Access::Framework);
        let mut ctx = ActionContext {
            proposal_id: Digest::ZERO,
            service_key: self.service_key.as_ref(),
            ledger_secret: self.state.secret.as_ref(),
            rng: &mut self.rng,
        };
        let outcome = match process_request(&mut tx, &signed, &mut ctx, pending) {
            Ok(o) => o,
            Err(e) => return Response::Error(e.to_string()),
        };
        let ws = tx.into_write_set();
        let txid = if outcome.recorded {
            let kind = if ws.touches(maps::NODES_INFO) {
                EntryKind::Reconfiguration
            } else {
                EntryKind::Governance
            };
            Some(self.append(kind, &ws, None, now))
        } else {
            None
        };
        Response::Governance {
            proposal_id: outcome.proposal_id,
            status: outcome.status,
            txid,
        }
    }

    /// Local read of the application map, for tests and tools.
    pub fn read_message(&self, id: u64) -> Option<String> {
        self.state
            .store
            .get(APP_MESSAGES, id.to_string().as_bytes())
            .map(|v| String::from_utf8_lossy(v).into_owned())
    }
}
