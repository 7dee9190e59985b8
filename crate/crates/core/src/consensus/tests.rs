use std::collections::VecDeque;

use proptest::prelude::*;

use super::*;
use crate::crypto::SymmetricSecret;
use crate::kvstore::WriteSet;

struct NullReplica(Signature);

impl Replica for NullReplica {
    fn apply(&mut self, _: &LedgerEntry) -> Option<BTreeSet<NodeId>> {
        None
    }
    fn rollback(&mut self, _: u64) {}
    fn commit(&mut self, _: u64) {}
    fn learners(&self) -> BTreeSet<NodeId> {
        BTreeSet::new()
    }
    fn endorsement(&self) -> Option<Signature> {
        Some(self.0)
    }
}

fn key(i: u64) -> KeyPair {
    KeyPair::from_seed([i as u8 + 1; 32])
}

fn user_entry(txid: TransactionId) -> LedgerEntry {
    let mut ws = WriteSet::new();
    ws.put("public:app.msgs", txid.seqno.to_le_bytes().to_vec(), b"x".to_vec());
    LedgerEntry::seal(EntryKind::User, txid, &ws, None, &SymmetricSecret([3; 32]))
}

/// Builds a ledger from tokens like `1.1s 1.2 1.3s`.
fn ledger_of(layout: &str) -> Ledger {
    let mut l = Ledger::new();
    for tok in layout.split_whitespace() {
        let (txid, signed) = match tok.strip_suffix('s') {
            Some(t) => (t, true),
            None => (tok, false),
        };
        let txid: TransactionId = txid.parse().unwrap();
        let entry = if signed {
            let p = SignaturePayload::create(txid, NodeId(9), &key(9), Signature::EMPTY, l.pending_root(), vec![]);
            LedgerEntry::signature(txid, &p)
        } else {
            user_entry(txid)
        };
        l.append(entry).unwrap();
    }
    l
}

fn all(n: u64) -> Vec<Configuration> {
    vec![Configuration {
        seqno: 1,
        nodes: (0..n).map(NodeId).collect(),
    }]
}

struct Cluster {
    nodes: Vec<Consensus>,
    replica: NullReplica,
    now: Time,
}

impl Cluster {
    fn new(ledgers: &[&str]) -> Cluster {
        let n = ledgers.len() as u64;
        let nodes = ledgers
            .iter()
            .enumerate()
            .map(|(i, layout)| {
                let i = i as u64;
                Consensus::new(
                    NodeId(i),
                    ConsensusConfig::default(),
                    key(i),
                    ledger_of(layout),
                    all(n),
                    i,
                )
            })
            .collect();
        Cluster {
            nodes,
            replica: NullReplica(Signature::EMPTY),
            now: 1_000,
        }
    }

    /// Delivers queued messages until quiet, dropping those `link` rejects.
    fn run(&mut self, link: impl Fn(NodeId, NodeId) -> bool) {
        let mut queue: VecDeque<Message> = VecDeque::new();
        loop {
            for n in &mut self.nodes {
                queue.extend(n.take_outbox());
            }
            let Some(m) = queue.pop_front() else { break };
            if !link(m.from, m.to) {
                continue;
            }
            self.now += 1;
            let to = m.to.0 as usize;
            self.nodes[to].handle(m, self.now, &mut self.replica);
        }
    }

    fn node(&mut self, i: usize) -> &mut Consensus {
        &mut self.nodes[i]
    }
}

const FIG4: [&str; 5] = [
    "1.1s 1.2 1.3s",
    "1.1s 1.2 1.3s 2.4s",
    "1.1s 1.2 1.3s 3.4s 3.5s",
    "1.1s 1.2 1.3s 3.4s",
    "1.1s 1.2 1.3s 3.4s",
];

fn votes_for(candidate: usize) -> BTreeSet<NodeId> {
    let mut c = Cluster::new(&FIG4);
    let cand_sig = c.nodes[candidate].ledger().last_signature();
    let mut granted = BTreeSet::from([NodeId(candidate as u64)]);
    for v in 0..5 {
        if v == candidate {
            continue;
        }
        let req = Message {
            from: NodeId(candidate as u64),
            to: NodeId(v as u64),
            body: MessageBody::RequestVote {
                view: 4,
                last_signature: cand_sig,
            },
        };
        c.node(v).handle(req, 10, &mut NullReplica(Signature::EMPTY));
        for m in c.node(v).take_outbox() {
            if let MessageBody::RequestVoteResponse { granted: true, .. } = m.body {
                granted.insert(m.from);
            }
        }
    }
    granted
}

#[test]
fn fig4_vote_table() {
    let expect = [
        vec![0],
        vec![0, 1],
        vec![0, 1, 2, 3, 4],
        vec![0, 1, 3, 4],
        vec![0, 1, 3, 4],
    ];
    for (cand, want) in expect.iter().enumerate() {
        let got: Vec<u64> = votes_for(cand).into_iter().map(|n| n.0).collect();
        assert_eq!(&got, want, "votes for n{cand}");
        let electable = got.len() * 2 > 5;
        assert_eq!(electable, cand >= 2, "n{cand}");
    }
}

#[test]
fn negative_hint_points_at_last_signature_below_prev() {
    let mut c = Consensus::new(
        NodeId(1),
        ConsensusConfig::default(),
        key(1),
        ledger_of("1.1s 1.2 1.3 1.4s"),
        all(3),
        1,
    );
    let msg = Message {
        from: NodeId(0),
        to: NodeId(1),
        body: MessageBody::AppendEntries {
            view: 2,
            prev: TransactionId::new(2, 9),
            entries: vec![],
            commit: 0,
        },
    };
    c.handle(msg, 5, &mut NullReplica(Signature::EMPTY));
    let out = c.take_outbox();
    assert_eq!(
        out[0].body,
        MessageBody::AppendEntriesResponse {
            view: 2,
            success: false,
            last_seqno: 4
        }
    );
    assert_eq!(c.view(), 2);
}

/// Left half of the figure: n2 leads view 3 and n3, n4 acknowledge 3.4.
fn fig4_left() -> Cluster {
    let mut c = Cluster::new(&FIG4);
    let now = c.now;
    c.node(2).assume_primary(now);
    for from in [3, 4] {
        let ack = Message {
            from: NodeId(from),
            to: NodeId(2),
            body: MessageBody::AppendEntriesResponse {
                view: 3,
                success: true,
                last_seqno: 4,
            },
        };
        let now = c.now;
        c.nodes[2].handle(ack, now, &mut NullReplica(Signature::EMPTY));
    }
    c.node(2).take_outbox();
    for to in [3, 4] {
        let ae = Message {
            from: NodeId(2),
            to: NodeId(to),
            body: MessageBody::AppendEntries {
                view: 3,
                prev: TransactionId::new(3, 4),
                entries: vec![],
                commit: 4,
            },
        };
        let now = c.now;
        c.nodes[to as usize].handle(ae, now, &mut NullReplica(Signature::EMPTY));
        c.nodes[to as usize].take_outbox();
    }
    c
}

#[test]
fn fig4_left_commit_and_status() {
    let c = fig4_left();
    let commits: Vec<u64> = c.nodes.iter().map(|n| n.commit_seqno()).collect();
    assert_eq!(commits[2..], [4, 4, 4]);
    assert!(commits[0] < 4 && commits[1] < 4);
    assert_eq!(c.nodes[2].status(&TransactionId::new(3, 5)), TransactionStatus::Pending);
    assert_eq!(
        c.nodes[2].status(&TransactionId::new(3, 4)),
        TransactionStatus::Committed
    );
}

#[test]
fn fig4_right_after_view_change() {
    let mut c = fig4_left();
    // n2 is cut off before it can replicate 3.5, then n4 times out
    let now = c.now + 10_000_000;
    c.now = now;
    let mut replica = NullReplica(Signature::EMPTY);
    c.nodes[4].tick(now, &mut replica);
    assert_eq!(c.nodes[4].role(), Role::Candidate);
    c.run(|from, to| from != NodeId(2) && to != NodeId(2) || from == NodeId(4) || to == NodeId(4));
    assert!(c.nodes[4].is_primary());
    assert_eq!(c.nodes[4].view(), 4);
    assert_eq!(c.nodes[4].ledger().last_txid(), TransactionId::new(4, 5));
    for i in [0, 1, 2, 3] {
        assert!(c.nodes[i].ledger().matches(&TransactionId::new(4, 5)), "n{i}");
    }
    assert_eq!(c.nodes[4].commit_seqno(), 5);
    // a heartbeat carries the commit point
    let now = c.now + 100_000;
    c.nodes[4].tick(now, &mut replica);
    c.run(|from, to| from == NodeId(4) || to == NodeId(4));
    assert_eq!(c.nodes[2].commit_seqno(), 5);

    let now = now + 1;
    let mut r = NullReplica(Signature::EMPTY);
    for _ in 0..2 {
        let t = c.nodes[4].next_txid();
        c.nodes[4].append_local(user_entry(t), now, &mut r);
    }
    c.nodes[4].sign(now, &mut r);
    c.nodes[4].replicate(now, false);
    let only_n1 = |from: NodeId, to: NodeId| [from, to].contains(&NodeId(1)) && [from, to].contains(&NodeId(4));
    c.run(only_n1);
    assert_eq!(c.nodes[4].ledger().last_txid(), TransactionId::new(4, 8));
    assert_eq!(c.nodes[1].ledger().last_txid(), TransactionId::new(4, 8));
    assert_eq!(c.nodes[4].commit_seqno(), 5);
    assert_eq!(c.nodes[4].status(&TransactionId::new(4, 8)), TransactionStatus::Pending);
    assert_eq!(c.nodes[2].status(&TransactionId::new(3, 5)), TransactionStatus::Invalid);
    assert_eq!(c.nodes[2].ledger().last_txid(), TransactionId::new(4, 5));
}

#[test]
fn candidate_without_signature_after_join_does_not_stand() {
    let cfgs = vec![
        Configuration {
            seqno: 1,
            nodes: [0, 1, 2].map(NodeId).into(),
        },
        Configuration {
            seqno: 4,
            nodes: [0, 1, 2, 3].map(NodeId).into(),
        },
    ];
    let c = Consensus::new(
        NodeId(3),
        ConsensusConfig::default(),
        key(3),
        ledger_of("1.1s 1.2 1.3s 1.4"),
        cfgs.clone(),
        3,
    );
    assert!(!c.can_stand());
    let c = Consensus::new(
        NodeId(3),
        ConsensusConfig::default(),
        key(3),
        ledger_of("1.1s 1.2 1.3s 1.4 1.5s"),
        cfgs,
        3,
    );
    assert!(c.can_stand());
}

proptest! {
    #[test]
    fn commit_needs_a_majority_of_every_config(
        a in proptest::collection::btree_set(0u64..6, 1..6),
        b in proptest::collection::btree_set(0u64..6, 1..6),
        acks in proptest::collection::btree_set(1u64..6, 0..6),
    ) {
        let configs = vec![
            Configuration { seqno: 1, nodes: a.iter().copied().map(NodeId).collect() },
            Configuration { seqno: 1, nodes: b.iter().copied().map(NodeId).collect() },
        ];
        let mut p = Consensus::new(NodeId(0), ConsensusConfig::default(), key(0), ledger_of("1.1 1.2s"), configs.clone(), 0);
        p.assume_primary(0);
        let mut r = NullReplica(Signature::EMPTY);
        for n in &acks {
            let m = Message {
                from: NodeId(*n),
                to: NodeId(0),
                body: MessageBody::AppendEntriesResponse { view: 1, success: true, last_seqno: 2 },
            };
            p.handle(m, 1, &mut r);
        }
        let oracle = configs.iter().all(|c| {
            let yes = c.nodes.iter().filter(|n| n.0 == 0 || acks.contains(&n.0)).count();
            2 * yes > c.nodes.len()
        });
        prop_assert_eq!(p.commit_seqno() == 2, oracle);
    }
}
