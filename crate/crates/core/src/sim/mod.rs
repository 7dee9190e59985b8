//! Deterministic discrete-event simulation of a service: nodes, network,
//! clients, members and faults driven from a single seeded event queue.

pub mod checker;
pub mod metrics;
pub mod scenario;
mod sweep;
pub mod trace;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use thiserror::Error;

use crate::consensus::{ConsensusEvent, Role};
use crate::crypto::{hash_concat, Digest, EncryptionKeyPair, KeyPair, PublicId, SymmetricSecret};
use crate::governance::{nodes, Action, Ballot, ConstitutionKind, GovRequest, NodeStatus, Proposal, SignedRequest};
use crate::ledger::EntryKind;
use crate::node::{Genesis, GenesisMember, Node, NodeEvent, NodeSetup, Packet, Request, Response};
use crate::recovery::RecoveryError;
use crate::types::{MemberId, NodeId, Time, TransactionId, MILLIS};

pub use checker::{check, CheckReport, Finding, Invariant};
pub use metrics::{Bucket, Metrics, WriteRecord};
pub use scenario::{
    ActionSpec, ConsensusParams, CostParams, Fault, FaultStep, GovKind, GovStep, NetworkParams, Scenario, Target,
    Workload,
};
pub use sweep::{sweep, SweepPoint};
pub use trace::{to_jsonl, write_jsonl, Caller, Outcome, TraceEvent, TraceRecord};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Recovery(#[from] RecoveryError),
}

/// Deterministic 32 bytes for a named purpose.
pub fn derive_seed(seed: u64, purpose: &str, index: u64) -> [u8; 32] {
    hash_concat(&[b"sim", purpose.as_bytes(), &seed.to_le_bytes(), &index.to_le_bytes()]).0
}

pub struct SimMember {
    pub id: MemberId,
    pub key: KeyPair,
    pub encryption: EncryptionKeyPair,
}

pub struct SimNode {
    pub node: Node,
    pub alive: bool,
    busy_until: Time,
    tamper: Vec<u64>,
}

enum Event {
    Tick(NodeId),
    Packet(Packet),
    Arrive {
        rid: u64,
        node: NodeId,
        req: Request,
        via: Option<NodeId>,
    },
    Forwarded {
        rid: u64,
        via: NodeId,
        resp: Response,
    },
    Reply {
        rid: u64,
        node: NodeId,
        resp: Response,
    },
    Timeout(u64),
    Wake(usize),
    Retry {
        client: usize,
        req: Request,
        submitted: Time,
    },
    Fault(usize),
    Gov(usize),
}

impl Event {
    fn node(&self) -> Option<NodeId> {
        match self {
            Event::Tick(n) => Some(*n),
            Event::Packet(p) => Some(p.to),
            Event::Arrive { node, .. } => Some(*node),
            Event::Forwarded { via, .. } => Some(*via),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Route {
    Client(usize),
    Step(usize),
}

struct InFlight {
    rid: u64,
    req: Request,
    submitted: Time,
    node: NodeId,
}

struct ClientState {
    rng: ChaCha8Rng,
    target: NodeId,
    inflight: Option<InFlight>,
    writes: Vec<(u64, TransactionId)>,
    next_msg: u64,
}

#[derive(PartialEq, Eq)]
enum StepState {
    Waiting,
    Armed,
    Done,
}

struct StepRun {
    step: GovStep,
    state: StepState,
    target: NodeId,
    signed: Option<SignedRequest>,
    inflight: Option<InFlight>,
    attempts: u32,
}

const DEFERRABLE: u64 = 1 << 62;
const GOV_RETRY: Time = 50 * MILLIS;
const GOV_MAX_ATTEMPTS: u32 = 400;

pub struct Simulation {
    scn: Scenario,
    now: Time,
    seq: u64,
    queue: BTreeMap<(Time, u64), Event>,
    nodes: BTreeMap<NodeId, SimNode>,
    next_node: u64,
    members: Vec<SimMember>,
    service_identity: PublicId,
    ledger_secret: SymmetricSecret,
    clients: Vec<ClientState>,
    steps: Vec<StepRun>,
    faults: Vec<FaultStep>,
    waiting: BTreeMap<String, (Vec<usize>, Vec<usize>)>,
    routes: BTreeMap<u64, Route>,
    next_rid: u64,
    sessions: BTreeMap<(Route, NodeId), NodeId>,
    net_rng: ChaCha8Rng,
    fault_rng: ChaCha8Rng,
    partition: Option<BTreeMap<NodeId, usize>>,
    drop_probability: f64,
    last_crashed: Option<NodeId>,
    last_joined: Option<NodeId>,
    join_labels: BTreeMap<NodeId, String>,
    proposals: BTreeMap<String, Digest>,
    commits: BTreeMap<u64, (TransactionId, Time)>,
    global_commit: u64,
    trace: Vec<TraceRecord>,
    metrics: Metrics,
}

/// Everything a finished run produced.
pub struct RunOutput {
    pub trace: Vec<TraceRecord>,
    pub report: CheckReport,
    pub metrics: Metrics,
}

impl Simulation {
    pub fn new(scn: Scenario) -> Result<Simulation, SimError> {
        if scn.nodes == 0 {
            return Err(SimError::Scenario("at least one node is required".into()));
        }
        if scn.members > 0 && (scn.recovery_threshold == 0 || scn.recovery_threshold as usize > scn.members) {
            return Err(SimError::Scenario(
                "recovery threshold must be within 1..=members".into(),
            ));
        }
        let seed = scn.seed;
        let members: Vec<SimMember> = (0..scn.members as u64)
            .map(|i| SimMember {
                id: MemberId(i),
                key: KeyPair::from_seed(derive_seed(seed, "member", i)),
                encryption: EncryptionKeyPair::from_seed(derive_seed(seed, "member-enc", i)),
            })
            .collect();
        let service_key = KeyPair::from_seed(derive_seed(seed, "service", 0));
        let genesis = Genesis {
            service_key: service_key.clone(),
            ledger_secret: SymmetricSecret(derive_seed(seed, "ledger-secret", 0)),
            nodes: (0..scn.nodes as u64)
                .map(|i| (NodeId(i), node_key(seed, NodeId(i)).public_id()))
                .collect(),
            code_id: scn.code_id.clone(),
            members: members
                .iter()
                .map(|m| GenesisMember {
                    id: m.id,
                    public_id: m.key.public_id(),
                    encryption_key: m.encryption.public_key(),
                })
                .collect(),
            users: Vec::new(),
            recovery_threshold: scn.recovery_threshold,
            constitution: ConstitutionKind::StrictMajority,
            open: true,
        };
        let mut share_rng = ChaCha8Rng::from_seed(derive_seed(seed, "genesis", 0));
        let entries = genesis.entries(NodeId(0), &node_key(seed, NodeId(0)), &mut share_rng)?;

        let mut sim = Simulation {
            now: 0,
            seq: 0,
            queue: BTreeMap::new(),
            nodes: BTreeMap::new(),
            next_node: scn.nodes as u64,
            members,
            service_identity: service_key.public_id(),
            ledger_secret: genesis.ledger_secret.clone(),
            clients: Vec::new(),
            steps: Vec::new(),
            faults: scn.faults.clone(),
            waiting: BTreeMap::new(),
            routes: BTreeMap::new(),
            next_rid: 0,
            sessions: BTreeMap::new(),
            net_rng: ChaCha8Rng::from_seed(derive_seed(seed, "network", 0)),
            fault_rng: ChaCha8Rng::from_seed(derive_seed(seed, "faults", 0)),
            partition: None,
            drop_probability: scn.network.drop_probability,
            last_crashed: None,
            last_joined: None,
            join_labels: BTreeMap::new(),
            proposals: BTreeMap::new(),
            commits: BTreeMap::new(),
            global_commit: 0,
            trace: Vec::new(),
            metrics: Metrics::default(),
            scn,
        };
        for i in 0..sim.scn.nodes as u64 {
            let id = NodeId(i);
            let mut node = Node::from_genesis(sim.setup(id, None), &genesis, entries.clone());
            if i == 0 {
                node.start_as_primary(0);
            }
            sim.add_node(node, false);
        }
        for i in 0..sim.scn.workload.clients {
            let mut rng = ChaCha8Rng::from_seed(derive_seed(seed, "client", i as u64));
            let target = NodeId(rng.gen_range(0..sim.scn.nodes as u64));
            let start = rng.gen_range(0..5 * MILLIS) + MILLIS;
            sim.clients.push(ClientState {
                rng,
                target,
                inflight: None,
                writes: Vec::new(),
                next_msg: 0,
            });
            sim.push(start, Event::Wake(i));
        }
        for i in 0..sim.faults.len() {
            let f = &sim.faults[i];
            match f.after.clone() {
                Some(label) => sim.waiting.entry(label).or_default().0.push(i),
                None => {
                    let at = f.at_ms * MILLIS;
                    sim.push(at, Event::Fault(i));
                }
            }
        }
        for step in sim.scn.governance.clone() {
            sim.add_step(step);
        }
        Ok(sim)
    }

    fn setup(&self, id: NodeId, code_id: Option<String>) -> NodeSetup {
        NodeSetup {
            id,
            key: node_key(self.scn.seed, id),
            code_id: code_id.unwrap_or_else(|| self.scn.code_id.clone()),
            consensus: self.scn.consensus.config(),
            snapshot_interval: self.scn.snapshot_interval,
            seed: u64::from_le_bytes(
                derive_seed(self.scn.seed, "node-seed", id.0)[..8]
                    .try_into()
                    .expect("8 bytes"),
            ),
        }
    }

    fn add_node(&mut self, node: Node, joining: bool) {
        let id = node.id();
        self.record(TraceEvent::Started { node: id, joining });
        self.nodes.insert(
            id,
            SimNode {
                node,
                alive: true,
                busy_until: 0,
                tamper: Vec::new(),
            },
        );
        let offset = self.now + 1 + (id.0 * 997) % (self.scn.tick_ms.max(1) * MILLIS);
        self.push(offset, Event::Tick(id));
        self.after_node(id, 0);
    }

    fn add_step(&mut self, step: GovStep) {
        let i = self.steps.len();
        let target = NodeId(self.fault_rng.gen_range(0..self.scn.nodes as u64));
        let after = step.after.clone();
        let at = step.at_ms * MILLIS;
        self.steps.push(StepRun {
            step,
            state: StepState::Waiting,
            target,
            signed: None,
            inflight: None,
            attempts: 0,
        });
        match after {
            Some(label) => match self.metrics.milestones.get(&label) {
                Some(_) => self.arm_step(i, self.now + at),
                None => self.waiting.entry(label).or_default().1.push(i),
            },
            None => self.arm_step(i, at),
        }
    }

    fn arm_step(&mut self, i: usize, at: Time) {
        self.steps[i].state = StepState::Armed;
        self.push(at.max(self.now), Event::Gov(i));
    }

    fn push(&mut self, at: Time, ev: Event) {
        self.seq += 1;
        self.queue.insert((at, DEFERRABLE | self.seq), ev);
    }

    /// Consensus traffic held up by a busy node runs before queued requests.
    fn push_first(&mut self, at: Time, ev: Event) {
        self.seq += 1;
        self.queue.insert((at, self.seq), ev);
    }

    fn record(&mut self, event: TraceEvent) {
        self.trace.push(TraceRecord { t: self.now, event });
    }

    pub fn now(&self) -> Time {
        self.now
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scn
    }

    pub fn service_identity(&self) -> PublicId {
        self.service_identity
    }

    pub fn ledger_secret(&self) -> &SymmetricSecret {
        &self.ledger_secret
    }

    pub fn members(&self) -> &[SimMember] {
        &self.members
    }

    pub fn nodes(&self) -> &BTreeMap<NodeId, SimNode> {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(&id).map(|n| &n.node)
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn milestones(&self) -> &BTreeMap<String, Time> {
        &self.metrics.milestones
    }

    /// The node currently leading the highest view, if alive.
    pub fn primary(&self) -> Option<NodeId> {
        self.nodes
            .values()
            .filter(|n| n.alive && n.node.is_primary())
            .max_by_key(|n| n.node.view())
            .map(|n| n.node.id())
    }

    /// Committed ledger files of a node, with any scheduled tampering applied.
    pub fn ledger_files(&self, id: NodeId) -> Vec<(String, Vec<u8>)> {
        let Some(sn) = self.nodes.get(&id) else {
            return Vec::new();
        };
        let mut files = sn.node.ledger_files();
        let total: u64 = files.iter().map(|f| f.1.len() as u64).sum();
        for off in &sn.tamper {
            if total == 0 {
                break;
            }
            let mut at = off % total;
            for (_, bytes) in files.iter_mut() {
                if at < bytes.len() as u64 {
                    bytes[at as usize] ^= 0x01;
                    break;
                }
                at -= bytes.len() as u64;
            }
        }
        files
    }

    pub fn is_tampered(&self, id: NodeId) -> bool {
        self.nodes.get(&id).is_some_and(|n| !n.tamper.is_empty())
    }

    /// Runs until the scenario's end time.
    pub fn run(&mut self) {
        let end = self.scn.end_time();
        self.run_until(end);
    }

    pub fn run_until(&mut self, end: Time) {
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0 > end {
                break;
            }
            let ((t, _), ev) = entry.remove_entry();
            self.now = t;
            self.dispatch(ev);
        }
        self.now = self.now.max(end);
    }

    pub fn finish(mut self) -> RunOutput {
        let load_end = self.scn.duration_ms * MILLIS;
        let width = self.scn.bucket_ms;
        let commits = std::mem::take(&mut self.commits);
        self.metrics.max_commit = self.global_commit;
        self.metrics.finalize(load_end, &commits, width);
        let report = check(&self.trace);
        self.metrics.elections = report.elections;
        RunOutput {
            trace: self.trace,
            report,
            metrics: self.metrics,
        }
    }

    fn dispatch(&mut self, ev: Event) {
        if let Some(id) = ev.node() {
            let Some(sn) = self.nodes.get(&id) else { return };
            if !sn.alive {
                if let Event::Packet(p) = &ev {
                    let (from, to, kind) = (p.from, p.to, p.kind().to_string());
                    self.record(TraceEvent::Drop {
                        from,
                        to,
                        kind,
                        reason: "destination down".into(),
                    });
                }
                return;
            }
            if self.now < sn.busy_until {
                let at = sn.busy_until;
                if matches!(ev, Event::Packet(_)) {
                    self.push_first(at, ev);
                } else {
                    self.push(at, ev);
                }
                return;
            }
        }
        match ev {
            Event::Tick(id) => {
                let now = self.now;
                if let Some(sn) = self.nodes.get_mut(&id) {
                    sn.node.tick(now);
                }
                self.after_node(id, 0);
                let next = now + self.scn.tick_ms.max(1) * MILLIS;
                if self.nodes.get(&id).is_some_and(|n| !n.node.is_stopped()) {
                    self.push(next, Event::Tick(id));
                }
            }
            Event::Packet(p) => {
                let id = p.to;
                self.record(TraceEvent::Deliver {
                    from: p.from,
                    to: p.to,
                    kind: p.kind().to_string(),
                    entries: p.entries(),
                });
                let now = self.now;
                if let Some(sn) = self.nodes.get_mut(&id) {
                    sn.node.handle_packet(p, now);
                }
                self.after_node(id, self.scn.cost.message_us);
            }
            Event::Arrive { rid, node, req, via } => self.on_arrive(rid, node, req, via),
            Event::Forwarded { rid, via, resp } => {
                let done = self.after_node(via, self.scn.cost.message_us);
                let lat = self.client_latency();
                self.push(done + lat, Event::Reply { rid, node: via, resp });
            }
            Event::Reply { rid, node, resp } => self.on_reply(rid, node, resp),
            Event::Timeout(rid) => self.on_timeout(rid),
            Event::Wake(c) => self.client_next(c),
            Event::Retry { client, req, submitted } => {
                let target = self.clients[client].target;
                self.send_request(Route::Client(client), target, req, submitted);
            }
            Event::Fault(i) => self.apply_fault(i),
            Event::Gov(i) => self.run_step(i),
        }
    }

    fn latency(&mut self) -> Time {
        let n = &self.scn.network;
        self.net_rng
            .gen_range(n.latency_min_us..=n.latency_max_us.max(n.latency_min_us))
    }

    fn client_latency(&mut self) -> Time {
        let n = &self.scn.network;
        self.net_rng
            .gen_range(n.client_latency_min_us..=n.client_latency_max_us.max(n.client_latency_min_us))
    }

    fn link_up(&self, a: NodeId, b: NodeId) -> bool {
        match &self.partition {
            None => true,
            Some(groups) => groups.get(&a).copied().unwrap_or(0) == groups.get(&b).copied().unwrap_or(0),
        }
    }

    /// Sends between nodes; `None` when the network loses the message.
    fn transmit(&mut self, from: NodeId, to: NodeId, kind: &str, at: Time) -> Option<Time> {
        let reason = if !self.link_up(from, to) {
            Some("partitioned")
        } else if self.drop_probability > 0.0 && self.net_rng.gen_bool(self.drop_probability.min(1.0)) {
            Some("lost")
        } else {
            None
        };
        if let Some(reason) = reason {
            self.record(TraceEvent::Drop {
                from,
                to,
                kind: kind.to_string(),
                reason: reason.into(),
            });
            return None;
        }
        Some(at + self.latency())
    }

    /// Accounts the work a node just did, records its events and sends its
    /// output. Returns when the node becomes free.
    fn after_node(&mut self, id: NodeId, base_cost: u64) -> Time {
        let now = self.now;
        let Some(sn) = self.nodes.get_mut(&id) else { return now };
        let events = sn.node.take_events();
        let outbox = sn.node.take_outbox();
        let cost = &self.scn.cost;
        let mut work = base_cost;
        for e in &events {
            if let NodeEvent::Consensus(ConsensusEvent::Appended { kind, .. }) = e {
                work += cost.entry_us;
                if *kind == EntryKind::Signature {
                    work += cost.signature_us;
                }
            }
        }
        let done = now + work;
        sn.busy_until = sn.busy_until.max(done);
        for e in events {
            self.on_node_event(id, &e);
            self.record(TraceEvent::Node { node: id, event: e });
        }
        for p in outbox {
            if let Some(at) = self.transmit(p.from, p.to, p.kind(), done) {
                self.push(at, Event::Packet(p));
            }
        }
        done
    }

    fn on_node_event(&mut self, id: NodeId, e: &NodeEvent) {
        match e {
            NodeEvent::Consensus(ConsensusEvent::Committed { txid, .. }) if txid.seqno > self.global_commit => {
                let Some(sn) = self.nodes.get(&id) else { return };
                for s in self.global_commit + 1..=txid.seqno {
                    if let Some(entry) = sn.node.ledger().get(s) {
                        self.commits.insert(s, (entry.txid, self.now));
                    }
                }
                self.global_commit = txid.seqno;
                let (now, width) = (self.now, self.scn.bucket_ms);
                self.metrics.bucket(now, width).max_commit = txid.seqno;
            }
            NodeEvent::Consensus(ConsensusEvent::Role {
                role: Role::Primary, ..
            }) => {
                let (now, width) = (self.now, self.scn.bucket_ms);
                self.metrics.bucket(now, width).primary = Some(id.0);
            }
            NodeEvent::Joined { .. } => {
                if let Some(label) = self.join_labels.remove(&id) {
                    self.milestone(&label);
                }
            }
            _ => {}
        }
    }

    fn milestone(&mut self, label: &str) {
        if self.metrics.milestones.contains_key(label) {
            return;
        }
        self.metrics.milestones.insert(label.to_string(), self.now);
        self.record(TraceEvent::Milestone {
            label: label.to_string(),
        });
        if let Some((faults, steps)) = self.waiting.remove(label) {
            for i in faults {
                let at = self.now + self.faults[i].at_ms * MILLIS;
                self.push(at, Event::Fault(i));
            }
            for i in steps {
                let at = self.now + self.steps[i].step.at_ms * MILLIS;
                self.arm_step(i, at);
            }
        }
    }

    // requests

    fn caller(&self, route: Route) -> Caller {
        match route {
            Route::Client(c) => Caller::Client(c as u64),
            Route::Step(s) => Caller::Member(self.steps[s].step.member),
        }
    }

    fn send_request(&mut self, route: Route, node: NodeId, req: Request, submitted: Time) {
        self.next_rid += 1;
        let rid = self.next_rid;
        self.routes.insert(rid, route);
        let op = match &req {
            Request::WriteMessage { .. } => "write",
            Request::ReadMessage { .. } => "read",
            Request::Status { .. } => "status",
            Request::Receipt { .. } => "receipt",
            Request::Governance(_) => "governance",
            Request::SubmitShare(_) => "submit_share",
        };
        let caller = self.caller(route);
        self.record(TraceEvent::Request {
            caller,
            node,
            op: op.into(),
        });
        let flight = InFlight {
            rid,
            req: req.clone(),
            submitted,
            node,
        };
        match route {
            Route::Client(c) => self.clients[c].inflight = Some(flight),
            Route::Step(s) => self.steps[s].inflight = Some(flight),
        }
        let at = self.now + self.client_latency();
        self.push(
            at,
            Event::Arrive {
                rid,
                node,
                req,
                via: None,
            },
        );
        let timeout = self.now + self.scn.workload.request_timeout_ms * MILLIS;
        self.push(timeout, Event::Timeout(rid));
    }

    fn on_arrive(&mut self, rid: u64, node: NodeId, req: Request, via: Option<NodeId>) {
        let now = self.now;
        let forwardable = matches!(
            req,
            Request::WriteMessage { .. } | Request::Governance(_) | Request::SubmitShare(_)
        );
        let resp = match self.nodes.get_mut(&node) {
            Some(sn) => sn.node.handle_request(req.clone(), now),
            None => return,
        };
        let done = self.after_node(node, self.scn.cost.request_us);
        let Some(route) = self.routes.get(&rid).copied() else {
            return;
        };
        match (resp, via) {
            (Response::NotPrimary { primary: Some(p) }, None) if forwardable && p != node => {
                let key = (route, node);
                match self.sessions.get(&key) {
                    Some(prev) if *prev != p => {
                        self.sessions.remove(&key);
                        let lat = self.client_latency();
                        let resp = Response::Unavailable("session terminated: primary changed".into());
                        self.push(done + lat, Event::Reply { rid, node, resp });
                        return;
                    }
                    _ => {
                        self.sessions.insert(key, p);
                    }
                }
                let caller = self.caller(route);
                self.record(TraceEvent::Forward {
                    caller,
                    from: node,
                    to: p,
                });
                if let Some(at) = self.transmit(node, p, "forward", done) {
                    self.push(
                        at,
                        Event::Arrive {
                            rid,
                            node: p,
                            req,
                            via: Some(node),
                        },
                    );
                }
            }
            (resp, Some(v)) => {
                if let Some(at) = self.transmit(node, v, "forward_reply", done) {
                    self.push(at, Event::Forwarded { rid, via: v, resp });
                }
            }
            (resp, None) => {
                let lat = self.client_latency();
                self.push(done + lat, Event::Reply { rid, node, resp });
            }
        }
    }

    fn take_flight(&mut self, rid: u64) -> Option<(Route, InFlight)> {
        let route = *self.routes.get(&rid)?;
        let slot = match route {
            Route::Client(c) => &mut self.clients[c].inflight,
            Route::Step(s) => &mut self.steps[s].inflight,
        };
        if slot.as_ref().is_some_and(|f| f.rid == rid) {
            self.routes.remove(&rid);
            slot.take().map(|f| (route, f))
        } else {
            None
        }
    }

    fn other_node(&mut self, current: NodeId) -> NodeId {
        let ids: Vec<NodeId> = self
            .nodes
            .iter()
            .filter(|(id, n)| **id != current && !n.node.is_stopped())
            .map(|(id, _)| *id)
            .collect();
        ids.choose(&mut self.net_rng).copied().unwrap_or(current)
    }

    fn on_timeout(&mut self, rid: u64) {
        let Some((route, flight)) = self.take_flight(rid) else {
            return;
        };
        let caller = self.caller(route);
        self.record(TraceEvent::Timeout {
            caller,
            node: flight.node,
        });
        let (now, width) = (self.now, self.scn.bucket_ms);
        self.metrics.bucket(now, width).timeouts += 1;
        let next = self.other_node(flight.node);
        match route {
            Route::Client(c) => {
                self.clients[c].target = next;
                self.send_request(route, next, flight.req, flight.submitted);
            }
            Route::Step(s) => {
                self.steps[s].target = next;
                self.push(self.now, Event::Gov(s));
            }
        }
    }

    fn on_reply(&mut self, rid: u64, node: NodeId, resp: Response) {
        let Some((route, flight)) = self.take_flight(rid) else {
            return;
        };
        match route {
            Route::Client(c) => self.client_reply(c, node, flight, resp),
            Route::Step(s) => self.step_reply(s, node, flight, resp),
        }
    }

    // clients

    fn client_next(&mut self, c: usize) {
        if self.now >= self.scn.duration_ms * MILLIS {
            return;
        }
        let w = &self.scn.workload;
        let (wf, sf, bytes) = (w.write_fraction, w.status_fraction, w.payload_bytes);
        let cl = &mut self.clients[c];
        let r: f64 = cl.rng.gen();
        let req = if r < wf || cl.writes.is_empty() {
            cl.next_msg += 1;
            let id = ((c as u64) << 32) | cl.next_msg;
            let mut msg = format!("c{c}-{}", cl.next_msg);
            while msg.len() < bytes {
                msg.push(char::from(b'a' + cl.rng.gen_range(0..26)));
            }
            Request::WriteMessage { id, msg }
        } else if r < wf + sf {
            let (_, txid) = cl.writes[cl.rng.gen_range(0..cl.writes.len())];
            Request::Status { txid }
        } else {
            let (id, _) = cl.writes[cl.rng.gen_range(0..cl.writes.len())];
            Request::ReadMessage { id }
        };
        let target = cl.target;
        self.send_request(Route::Client(c), target, req, self.now);
    }

    fn client_reply(&mut self, c: usize, node: NodeId, flight: InFlight, resp: Response) {
        let (now, width) = (self.now, self.scn.bucket_ms);
        let outcome = match (&flight.req, resp) {
            (Request::WriteMessage { id, .. }, Response::Written { txid }) => {
                self.clients[c].writes.push((*id, txid));
                self.metrics.writes.push(WriteRecord {
                    client: c as u64,
                    submitted: flight.submitted,
                    acked: now,
                    txid,
                    committed: None,
                });
                self.metrics.bucket(now, width).writes_acked += 1;
                Outcome::Written { txid }
            }
            (_, Response::Message { value, read_at }) => {
                self.metrics.bucket(now, width).reads_ok += 1;
                Outcome::Read {
                    found: value.is_some(),
                    read_at,
                }
            }
            (Request::Status { txid }, Response::Status { status }) => {
                self.metrics.bucket(now, width).status_polls += 1;
                Outcome::Status { txid: *txid, status }
            }
            (_, other) => {
                self.metrics.bucket(now, width).declined += 1;
                if let Response::NotPrimary { primary: Some(p) } = &other {
                    self.clients[c].target = *p;
                } else if matches!(other, Response::Unavailable(_)) {
                    let next = self.other_node(node);
                    self.clients[c].target = next;
                }
                let reason = match other {
                    Response::NotPrimary { primary } => format!("not primary; primary {primary:?}"),
                    Response::Unavailable(r) | Response::Error(r) => r,
                    r => format!("unexpected {r:?}"),
                };
                self.record(TraceEvent::Outcome {
                    caller: Caller::Client(c as u64),
                    node,
                    outcome: Outcome::Declined { reason },
                    submitted: flight.submitted,
                });
                let retry = self.scn.workload.retry_ms * MILLIS;
                if self.now + retry < self.scn.duration_ms * MILLIS {
                    let ev = Event::Retry {
                        client: c,
                        req: flight.req,
                        submitted: flight.submitted,
                    };
                    self.push(self.now + retry, ev);
                }
                return;
            }
        };
        self.record(TraceEvent::Outcome {
            caller: Caller::Client(c as u64),
            node,
            outcome,
            submitted: flight.submitted,
        });
        let think = self.scn.workload.think_us;
        self.push(now + think, Event::Wake(c));
    }

    // governance

    fn resolve_args(&self, v: &Value) -> Value {
        match v {
            Value::String(s) if s == "$crashed" => self.last_crashed.map_or(Value::Null, |n| n.0.into()),
            Value::String(s) if s == "$joined" => self.last_joined.map_or(Value::Null, |n| n.0.into()),
            Value::Array(a) => Value::Array(a.iter().map(|x| self.resolve_args(x)).collect()),
            Value::Object(o) => Value::Object(o.iter().map(|(k, x)| (k.clone(), self.resolve_args(x))).collect()),
            other => other.clone(),
        }
    }

    fn reconfiguration_settled(&self) -> bool {
        let Some(p) = self.primary() else { return false };
        let node = &self.nodes[&p].node;
        let commit = node.commit_seqno();
        if node.consensus().configs().len() != 1 {
            return false;
        }
        let store = node.store();
        nodes(store).into_iter().all(|(id, info)| {
            let committed = store
                .get_versioned(
                    crate::kvstore::maps::NODES_INFO,
                    crate::governance::node_key(id).as_bytes(),
                )
                .is_some_and(|v| v.version <= commit);
            let live = self.nodes.get(&id).is_some_and(|n| n.alive);
            committed
                && match info.status {
                    NodeStatus::Trusted => live,
                    NodeStatus::Retiring => false,
                    NodeStatus::Pending | NodeStatus::Retired => true,
                }
        })
    }

    fn run_step(&mut self, i: usize) {
        if self.steps[i].state == StepState::Done || self.steps[i].inflight.is_some() {
            return;
        }
        if self.now >= self.scn.end_time() {
            return;
        }
        self.steps[i].attempts += 1;
        if self.steps[i].attempts > GOV_MAX_ATTEMPTS
            && !matches!(self.steps[i].step.kind, GovKind::AwaitReconfiguration)
        {
            self.steps[i].state = StepState::Done;
            return;
        }
        let member = self.steps[i].step.member;
        let Some(m) = self.members.get(member as usize) else {
            self.steps[i].state = StepState::Done;
            return;
        };
        let request = match &self.steps[i].step.kind {
            GovKind::AwaitReconfiguration => {
                if self.reconfiguration_settled() {
                    self.step_done(i);
                } else {
                    self.push(self.now + 10 * MILLIS, Event::Gov(i));
                }
                return;
            }
            GovKind::Propose { actions } => {
                if let Some(s) = &self.steps[i].signed {
                    s.clone()
                } else {
                    let actions = actions
                        .iter()
                        .map(|a| Action::new(&a.name, self.resolve_args(&a.args)))
                        .collect();
                    let req = GovRequest::Propose {
                        proposal: Proposal { actions },
                        nonce: i as u64,
                    };
                    SignedRequest::sign(m.id, &m.key, &req)
                }
            }
            GovKind::Vote { proposal, ballot } => match (&self.steps[i].signed, self.proposals.get(proposal)) {
                (Some(s), _) => s.clone(),
                (None, Some(id)) => {
                    let req = GovRequest::Ballot {
                        proposal_id: *id,
                        ballot: Ballot::Always(*ballot),
                    };
                    SignedRequest::sign(m.id, &m.key, &req)
                }
                (None, None) => {
                    self.push(self.now + GOV_RETRY, Event::Gov(i));
                    return;
                }
            },
        };
        self.steps[i].signed = Some(request.clone());
        let target = self.steps[i].target;
        self.send_request(Route::Step(i), target, Request::Governance(request), self.now);
    }

    fn step_done(&mut self, i: usize) {
        self.steps[i].state = StepState::Done;
        if let Some(label) = self.steps[i].step.label.clone() {
            self.milestone(&label);
        }
    }

    fn step_reply(&mut self, i: usize, node: NodeId, flight: InFlight, resp: Response) {
        let member = self.steps[i].step.member;
        let outcome = match resp {
            Response::Governance {
                proposal_id,
                status,
                txid,
            } => {
                if let (GovKind::Propose { .. }, Some(label)) = (&self.steps[i].step.kind, &self.steps[i].step.label) {
                    self.proposals.insert(label.clone(), proposal_id);
                }
                Outcome::Governance {
                    step: i,
                    proposal_id,
                    status,
                    txid,
                }
            }
            other => {
                let mut retry = GOV_RETRY;
                let mut finished = false;
                let reason = match other {
                    Response::NotPrimary { primary } => {
                        match primary {
                            Some(p) => {
                                self.steps[i].target = p;
                                retry = 5 * MILLIS;
                            }
                            None => self.steps[i].target = self.other_node(node),
                        }
                        format!("not primary; primary {primary:?}")
                    }
                    Response::Error(e) => {
                        finished = e.contains("already voted") || e.starts_with("proposal is");
                        e
                    }
                    Response::Unavailable(e) => {
                        self.steps[i].target = self.other_node(node);
                        e
                    }
                    r => format!("unexpected {r:?}"),
                };
                self.record(TraceEvent::Outcome {
                    caller: Caller::Member(member),
                    node,
                    outcome: Outcome::Declined { reason },
                    submitted: flight.submitted,
                });
                if finished {
                    self.step_done(i);
                } else {
                    self.push(self.now + retry, Event::Gov(i));
                }
                return;
            }
        };
        self.record(TraceEvent::Outcome {
            caller: Caller::Member(member),
            node,
            outcome,
            submitted: flight.submitted,
        });
        self.step_done(i);
    }

    // faults

    fn alive_ids(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|(_, n)| n.alive && !n.node.is_stopped())
            .map(|(id, _)| *id)
            .collect()
    }

    fn resolve(&mut self, t: &Target) -> Option<NodeId> {
        let alive = self.alive_ids();
        match t {
            Target::Primary => self.primary().or_else(|| alive.choose(&mut self.fault_rng).copied()),
            Target::RandomBackup => {
                let p = self.primary();
                let backups: Vec<NodeId> = alive.iter().copied().filter(|n| Some(*n) != p).collect();
                backups.choose(&mut self.fault_rng).copied()
            }
            Target::Random => alive.choose(&mut self.fault_rng).copied(),
            Target::Joined => self.last_joined,
            Target::Node(i) => Some(NodeId(*i)),
        }
    }

    fn crash(&mut self, id: NodeId) -> bool {
        match self.nodes.get_mut(&id) {
            Some(n) if n.alive => {
                n.alive = false;
                self.last_crashed = Some(id);
                self.record(TraceEvent::Fault {
                    description: format!("crash {id}"),
                });
                true
            }
            _ => false,
        }
    }

    fn spawn_joiner(&mut self, code_id: Option<String>, label: Option<String>) -> NodeId {
        let id = NodeId(self.next_node);
        self.next_node += 1;
        let mut node = Node::joining(self.setup(id, code_id));
        let to = self
            .primary()
            .or_else(|| self.alive_ids().first().copied())
            .unwrap_or(NodeId(0));
        node.request_join(to, self.now);
        self.add_node(node, true);
        self.last_joined = Some(id);
        if let Some(label) = label {
            self.join_labels.insert(id, label);
        }
        id
    }

    /// Governance steps that trust `new` and retire `dead` once `new` joined.
    fn schedule_replacement(&mut self, dead: NodeId, new: NodeId, joined_label: String) {
        let proposal = format!("{joined_label}/proposal");
        let proposer = self.fault_rng.gen_range(0..self.members.len().max(1) as u64);
        self.add_step(GovStep {
            at_ms: 0,
            after: Some(joined_label),
            label: Some(proposal.clone()),
            member: proposer,
            kind: GovKind::Propose {
                actions: vec![
                    ActionSpec {
                        name: "transition_node_to_trusted".into(),
                        args: serde_json::json!({ "node_id": new.0 }),
                    },
                    ActionSpec {
                        name: "remove_node".into(),
                        args: serde_json::json!({ "node_id": dead.0 }),
                    },
                ],
            },
        });
        for m in 0..self.members.len() as u64 {
            let delay = self.fault_rng.gen_range(0..50);
            self.add_step(GovStep {
                at_ms: delay,
                after: Some(proposal.clone()),
                label: None,
                member: m,
                kind: GovKind::Vote {
                    proposal: proposal.clone(),
                    ballot: true,
                },
            });
        }
    }

    fn apply_fault(&mut self, i: usize) {
        let step = self.faults[i].clone();
        let mut completes = true;
        match &step.fault {
            Fault::Crash { target } => match self.resolve(target) {
                Some(id) if self.crash(id) => {
                    if self.scn.auto_replace && !self.members.is_empty() {
                        let label = format!("replace-{id}");
                        let new = self.spawn_joiner(None, Some(label.clone()));
                        self.schedule_replacement(id, new, label);
                    }
                }
                _ => self.record(TraceEvent::Fault {
                    description: format!("crash skipped: no live {target:?}"),
                }),
            },
            Fault::RestartAsNew { target } => {
                let dead = self.resolve(target).filter(|id| self.crash(*id));
                let label = match (dead, self.scn.auto_replace) {
                    (Some(d), true) => format!("replace-{d}"),
                    _ => format!("restart-{i}"),
                };
                let new = self.spawn_joiner(None, Some(label.clone()));
                if let (Some(d), true) = (dead, self.scn.auto_replace && !self.members.is_empty()) {
                    self.schedule_replacement(d, new, label);
                }
            }
            Fault::ResumeFromDisk { target } => {
                if let Some(id) = self.resolve(target) {
                    self.crash(id);
                    let mut node = Node::joining(self.setup(id, None));
                    let to = self
                        .primary()
                        .or_else(|| self.alive_ids().first().copied())
                        .unwrap_or(NodeId(0));
                    node.request_join(to, self.now);
                    self.record(TraceEvent::Fault {
                        description: format!("resume {id} from disk"),
                    });
                    self.nodes.remove(&id);
                    self.add_node(node, true);
                }
            }
            Fault::Join { code_id } => {
                let label = step.label.clone();
                completes = label.is_none();
                self.spawn_joiner(code_id.clone(), label);
            }
            Fault::Partition { groups } => {
                let mut map = BTreeMap::new();
                for (g, members) in groups.iter().enumerate() {
                    for t in members {
                        if let Some(id) = self.resolve(t) {
                            map.insert(id, g);
                        }
                    }
                }
                self.record(TraceEvent::Fault {
                    description: format!("partition {map:?}"),
                });
                self.partition = Some(map);
            }
            Fault::Heal => {
                self.partition = None;
                self.record(TraceEvent::Fault {
                    description: "heal".into(),
                });
            }
            Fault::SetDrop { probability } => {
                self.drop_probability = *probability;
                self.record(TraceEvent::Fault {
                    description: format!("drop probability {probability}"),
                });
            }
            Fault::Tamper { target, offset } => {
                if let Some(id) = self.resolve(target) {
                    if let Some(n) = self.nodes.get_mut(&id) {
                        n.tamper.push(*offset);
                    }
                    self.record(TraceEvent::Fault {
                        description: format!("tamper {id} at {offset}"),
                    });
                }
            }
            Fault::Disaster => {
                for id in self.alive_ids() {
                    self.crash(id);
                }
            }
        }
        if completes {
            if let Some(label) = &step.label {
                self.milestone(label);
            }
        }
    }

    /// Node ids that are trusted in the current primary's view.
    pub fn trusted(&self) -> BTreeSet<NodeId> {
        self.primary()
            .map(|p| crate::governance::trusted_nodes(self.nodes[&p].node.store()))
            .unwrap_or_default()
    }
}

fn node_key(seed: u64, id: NodeId) -> KeyPair {
    KeyPair::from_seed(derive_seed(seed, "node", id.0))
}

/// Runs a scenario to completion and checks it.
pub fn run_scenario(scn: &Scenario) -> Result<RunOutput, SimError> {
    let mut sim = Simulation::new(scn.clone())?;
    sim.run();
    Ok(sim.finish())
}
