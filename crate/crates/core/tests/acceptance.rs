use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use consortium::consensus::{Configuration, Consensus, ConsensusConfig, Message, MessageBody, Replica, Role};
use consortium::crypto::{hash, recover_secret, split_secret, EncryptionKeyPair, KeyPair, Signature, SymmetricSecret};
use consortium::governance::{
    Action, Ballot, Constitution, ConstitutionKind, GovRequest, Proposal, ProposalStatus, Resolution, ServiceStatus,
    SignedRequest,
};
use consortium::kvstore::{Store, WriteSet};
use consortium::ledger::{audit_files, parse_chunk, EntryKind, Ledger, LedgerEntry, SignaturePayload};
use consortium::merkle::{verify_proof, MerkleState, Side};
use consortium::node::{Genesis, GenesisMember, Node, NodeEvent, NodeSetup, Request, Response, APP_MESSAGES};
use consortium::recovery::{
    encrypted_share, open_share, unwrap_secret, wrapped_secret, ShareCollector, ShareFile, ShareProgress,
};
use consortium::sim::{
    run_scenario, sweep, to_jsonl, Caller, Fault, FaultStep, Outcome, Scenario, Simulation, TraceEvent, TraceRecord,
};
use consortium::{MemberId, NodeId, Time, TransactionId};

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- 1

struct NullReplica;

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
        Some(Signature::EMPTY)
    }
}

/// `1.1s` is a signature entry, `1.2` a user entry.
fn fixture_ledger(layout: &str) -> Ledger {
    let signer = KeyPair::from_seed([9; 32]);
    let mut l = Ledger::new();
    for tok in layout.split_whitespace() {
        let (txid, signed) = tok.strip_suffix('s').map_or((tok, false), |t| (t, true));
        let txid: TransactionId = txid.parse().unwrap();
        let entry = if signed {
            let p = SignaturePayload::create(txid, NodeId(9), &signer, Signature::EMPTY, l.pending_root(), vec![]);
            LedgerEntry::signature(txid, &p)
        } else {
            let mut ws = WriteSet::new();
            ws.put("public:app.msgs", txid.seqno.to_le_bytes().to_vec(), b"x".to_vec());
            LedgerEntry::seal(EntryKind::User, txid, &ws, None, &SymmetricSecret([3; 32]))
        };
        l.append(entry).unwrap();
    }
    l
}

const FIVE_LEDGERS: [&str; 5] = [
    "1.1s 1.2 1.3s",
    "1.1s 1.2 1.3s 2.4s",
    "1.1s 1.2 1.3s 3.4s 3.5s",
    "1.1s 1.2 1.3s 3.4s",
    "1.1s 1.2 1.3s 3.4s",
];

fn vote_table() -> Result<String, String> {
    let cluster = || -> Vec<Consensus> {
        let cfg = vec![Configuration {
            seqno: 1,
            nodes: (0..5).map(NodeId).collect(),
        }];
        FIVE_LEDGERS
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let key = KeyPair::from_seed([i as u8 + 1; 32]);
                Consensus::new(
                    NodeId(i as u64),
                    ConsensusConfig::default(),
                    key,
                    fixture_ledger(l),
                    cfg.clone(),
                    i as u64,
                )
            })
            .collect()
    };
    // oracle: a voter grants when the candidate's last signature is at
    // least its own, compared as (view, seqno)
    let last_sig = |layout: &str| {
        layout
            .split_whitespace()
            .filter_map(|t| t.strip_suffix('s'))
            .map(|t| t.parse::<TransactionId>().unwrap())
            .max()
            .unwrap()
    };
    let expected = ["✗", "✗", "✓", "✓", "✓"];
    let mut row = Vec::new();
    for cand in 0..5usize {
        let mut nodes = cluster();
        let theirs = nodes[cand].ledger().last_signature();
        let mut voters = BTreeSet::from([cand]);
        for v in 0..5usize {
            if v == cand {
                continue;
            }
            let msg = Message {
                from: NodeId(cand as u64),
                to: NodeId(v as u64),
                body: MessageBody::RequestVote {
                    view: 4,
                    last_signature: theirs,
                },
            };
            nodes[v].handle(msg, 10, &mut NullReplica);
            for m in nodes[v].take_outbox() {
                if let MessageBody::RequestVoteResponse { granted: true, .. } = m.body {
                    voters.insert(v);
                }
            }
        }
        let oracle: BTreeSet<usize> = (0..5)
            .filter(|&v| v == cand || last_sig(FIVE_LEDGERS[cand]) >= last_sig(FIVE_LEDGERS[v]))
            .collect();
        ensure(voters == oracle, || {
            format!("n{cand}: voters {voters:?}, oracle {oracle:?}")
        })?;
        let wins = if voters.len() * 2 > 5 { "✓" } else { "✗" };
        ensure(wins == expected[cand], || {
            format!("n{cand} could win {wins}, expected {}", expected[cand])
        })?;
        row.push(format!("n{cand} {wins}"));
    }
    Ok(row.join(", "))
}

// ---------------------------------------------------------------- 2

fn merkle_fixture() -> Result<String, String> {
    let leaves: Vec<_> = (1..=11).map(|i| hash(format!("tx 1.{i}").as_bytes())).collect();
    let mut t = MerkleState::new();
    for l in &leaves {
        t.append(*l);
    }
    let proof = t.proof(6).map_err(|e| e.to_string())?;
    let sides = proof.sides();
    let want = vec![Side::Right, Side::Left, Side::Left, Side::Right];
    ensure(sides == want, || format!("sides {sides:?}"))?;
    let root = t.root().map_err(|e| e.to_string())?;
    ensure(verify_proof(&leaves[6], &proof, &root), || {
        "proof does not verify".into()
    })?;
    ensure(!verify_proof(&leaves[5], &proof, &root), || {
        "proof verifies a different leaf".into()
    })?;
    Ok("sides R,L,L,R; proof verifies".into())
}

// ---------------------------------------------------------------- 3

fn safety_sweep() -> Result<String, String> {
    let mut runs = 0;
    let mut crashes = 0;
    let mut partitions = 0;
    let mut reconfigs = 0;
    let mut retirements = 0;
    let mut elections = 0;
    for n in [1usize, 3, 5, 7] {
        for seed in 0..500u64 {
            let scn = Scenario::adversarial(n, seed);
            let out = run_scenario(&scn).map_err(|e| e.to_string())?;
            runs += 1;
            if let Some(f) = out.report.first_violation() {
                return Err(format!("n={n} seed={seed}: {:?} {}", f.invariant, f.detail));
            }
            elections += out.report.elections;
            for r in &out.trace {
                if let TraceEvent::Fault { description } = &r.event {
                    if description.starts_with("crash") {
                        crashes += 1;
                    } else if description.starts_with("partition") {
                        partitions += 1;
                    }
                }
            }
            for g in &scn.governance {
                if let consortium::sim::GovKind::Propose { actions } = &g.kind {
                    if actions.iter().any(|a| a.name == "transition_node_to_trusted") {
                        reconfigs += 1;
                    }
                    if actions.iter().any(|a| a.name == "remove_node") {
                        retirements += 1;
                    }
                }
            }
        }
    }
    ensure(
        crashes > 0 && partitions > 0 && reconfigs > 0 && retirements > 0,
        || "sweep did not exercise every fault kind".into(),
    )?;
    Ok(format!(
        "{runs} runs, 0 violations ({crashes} crashes, {partitions} partitions, {reconfigs} joins, {retirements} retirements, {elections} elections)"
    ))
}

// ---------------------------------------------------------------- 4

fn first_after(trace: &[TraceRecord], after: Time, pred: impl Fn(&TraceEvent) -> bool) -> Option<Time> {
    trace.iter().find(|r| r.t > after && pred(&r.event)).map(|r| r.t)
}

fn is_primary_event(ev: &TraceEvent) -> bool {
    matches!(
        ev,
        TraceEvent::Node {
            event: NodeEvent::Consensus(consortium::consensus::ConsensusEvent::Role {
                role: Role::Primary,
                ..
            }),
            ..
        }
    )
}

fn availability() -> Result<String, String> {
    let scn = Scenario::from_toml(include_str!("../../../scenarios/availability.toml")).map_err(|e| e.to_string())?;
    let out = run_scenario(&scn).map_err(|e| e.to_string())?;
    if let Some(f) = out.report.first_violation() {
        return Err(format!("{:?}: {}", f.invariant, f.detail));
    }
    let m = &out.metrics.milestones;
    let at = |l: &str| m.get(l).copied().ok_or_else(|| format!("milestone {l} never reached"));
    let (a, b, c, d, e, f) = (at("A")?, at("B")?, at("C")?, at("D")?, at("E")?, at("F")?);
    ensure(a < b && b < c && c < d && d <= e && e < f, || {
        format!("milestones out of order: {m:?}")
    })?;
    let trace = &out.trace;

    // A: the primary is gone, backups still answer reads
    let elected = first_after(trace, a, is_primary_event).ok_or("no election after A")?;
    ensure(elected < b, || "election only after B".into())?;
    let settle = a + 5 * consortium::types::MILLIS;
    let written_between = |from: Time, to: Time| {
        trace
            .iter()
            .filter(|r| {
                r.t > from
                    && r.t < to
                    && matches!(
                        r.event,
                        TraceEvent::Outcome {
                            outcome: Outcome::Written { .. },
                            ..
                        }
                    )
            })
            .count()
    };
    let halted = written_between(settle, elected);
    ensure(halted == 0, || {
        format!("{halted} writes acknowledged between A and the election")
    })?;
    let reads = trace
        .iter()
        .filter(|r| {
            r.t > a
                && r.t < elected
                && matches!(
                    r.event,
                    TraceEvent::Outcome {
                        outcome: Outcome::Read { .. },
                        ..
                    }
                )
        })
        .count();
    ensure(reads > 0, || "no reads served while the service had no primary".into())?;
    let resumed = written_between(elected, b);
    ensure(resumed > 0, || "writes did not resume after the election".into())?;

    // C..D: accepted on the second of three ballots
    let gov: Vec<(u64, ProposalStatus)> = trace
        .iter()
        .filter(|r| r.t > c && r.t <= d)
        .filter_map(|r| match &r.event {
            TraceEvent::Outcome {
                caller: Caller::Member(mid),
                outcome: Outcome::Governance { status, .. },
                ..
            } => Some((*mid, *status)),
            _ => None,
        })
        .collect();
    ensure(
        gov == vec![(0, ProposalStatus::Open), (1, ProposalStatus::Accepted)],
        || format!("ballot outcomes {gov:?}"),
    )?;

    // F: one more crash after the replacement, and the service still commits writes
    let reelected = first_after(trace, f, is_primary_event).ok_or("no election after F")?;
    let committed_after = out
        .metrics
        .writes
        .iter()
        .filter(|w| w.acked > reelected && w.committed.is_some())
        .count();
    ensure(committed_after > 0, || {
        "no committed writes after the second crash".into()
    })?;
    Ok(format!(
        "A<B<C<D<E<F; {reads} reads and no writes while leaderless; accepted on ballot 2 of 3; {committed_after} writes committed after F"
    ))
}

// ---------------------------------------------------------------- 5

fn signature_tradeoff() -> Result<String, String> {
    let base =
        Scenario::from_toml(include_str!("../../../scenarios/signature_sweep.toml")).map_err(|e| e.to_string())?;
    let values: Vec<String> = ["1", "10", "100", "1000"].iter().map(|s| s.to_string()).collect();
    let seeds: Vec<u64> = (1..=5).collect();
    let points = sweep(&base, "consensus.signature_interval", &values, &seeds).map_err(|e| e.to_string())?;
    if let Some(p) = points.iter().find(|p| !p.ok) {
        return Err(format!("interval {} seed {} violated safety", p.value, p.seed));
    }
    let mut means = Vec::new();
    for v in &values {
        let at: Vec<_> = points.iter().filter(|p| &p.value == v).collect();
        let n = at.len() as f64;
        let ttc = at.iter().map(|p| p.mean_ttc_ms).sum::<f64>() / n;
        let thr = at.iter().map(|p| p.throughput).sum::<f64>() / n;
        ensure(ttc.is_finite(), || format!("interval {v}: nothing committed"))?;
        means.push((v.clone(), ttc, thr));
    }
    for w in means.windows(2) {
        let (lo, hi) = (&w[0], &w[1]);
        ensure(lo.1 <= hi.1, || {
            format!(
                "TTC rises as the interval shrinks: {} at {} vs {} at {}",
                lo.1, lo.0, hi.1, hi.0
            )
        })?;
        ensure(lo.2 <= hi.2, || {
            format!(
                "throughput falls as the interval grows: {} at {} vs {} at {}",
                lo.2, lo.0, hi.2, hi.0
            )
        })?;
    }
    Ok(means
        .iter()
        .map(|(v, ttc, thr)| format!("{v}: ttc {ttc:.2} ms, {thr:.0} tx/s"))
        .collect::<Vec<_>>()
        .join("; "))
}

// ---------------------------------------------------------------- 6

fn member_request(sim: &Simulation, m: usize, req: &GovRequest) -> Request {
    let member = &sim.members()[m];
    Request::Governance(SignedRequest::sign(member.id, &member.key, req))
}

fn disaster_recovery() -> Result<String, String> {
    let mut scn = Scenario {
        name: "disaster".into(),
        seed: 11,
        duration_ms: 1500,
        drain_ms: 200,
        ..Scenario::default()
    };
    scn.workload.clients = 4;
    scn.workload.write_fraction = 0.9;
    scn.workload.think_us = 1000;
    scn.faults.push(FaultStep {
        at_ms: 900,
        after: None,
        label: None,
        fault: Fault::Disaster,
    });
    let mut sim = Simulation::new(scn).map_err(|e| e.to_string())?;
    sim.run();
    let old_identity = sim.service_identity();
    let old_secret = sim.ledger_secret().clone();
    ensure(sim.nodes().values().all(|n| !n.alive), || {
        "nodes survived the disaster".into()
    })?;
    let global_commit = sim.nodes().values().map(|n| n.node.commit_seqno()).max().unwrap_or(0);
    let source = *sim
        .nodes()
        .iter()
        .max_by_key(|(_, n)| n.node.commit_seqno())
        .map(|(id, _)| id)
        .ok_or("no nodes")?;
    let old = sim.node(source).ok_or("source node missing")?;
    let files = sim.ledger_files(source);
    let audit = audit_files(&files, &old_identity);
    ensure(audit.passed(), || {
        format!("source files fail audit: {:?}", audit.violation)
    })?;
    let c = audit.last_verified_signature.ok_or("no signature in files")?.seqno;
    ensure(c <= global_commit, || {
        format!("files run to {c}, past commit {global_commit}")
    })?;

    let receipt_seqno = old
        .ledger()
        .range(1, c)
        .iter()
        .rev()
        .find(|e| e.kind == EntryKind::User)
        .map(|e| e.txid.seqno)
        .ok_or("no user write before the crash")?;
    let receipt = old.ledger().receipt(receipt_seqno).ok_or("no receipt")?;

    // oracle: replay the old ledger up to `c` with the old secret
    let mut oracle = Store::new();
    for e in old.ledger().range(1, c) {
        let ws = e.write_set(Some(&old_secret)).map_err(|e| e.to_string())?;
        oracle.apply(e.txid, &ws).map_err(|e| e.to_string())?;
    }

    let setup = NodeSetup {
        id: NodeId(100),
        key: KeyPair::from_seed([77; 32]),
        code_id: "code-v1".into(),
        consensus: ConsensusConfig::default(),
        snapshot_interval: 0,
        seed: 5,
    };
    let now = sim.now();
    let mut node = Node::recover(setup, &files, Some(&old_identity), now).map_err(|e| e.to_string())?;
    let new_identity = node.service_identity().ok_or("recovered node has no identity")?;
    ensure(new_identity != old_identity, || "identity reused".into())?;
    ensure(node.service_status() == Some(ServiceStatus::Recovering), || {
        format!("status {:?}", node.service_status())
    })?;

    let open = Proposal {
        actions: vec![Action::new(
            "transition_service_to_open",
            json!({ "previous_identity": old_identity, "next_identity": new_identity }),
        )],
    };
    let resp = node.handle_request(
        member_request(
            &sim,
            0,
            &GovRequest::Propose {
                proposal: open,
                nonce: 0,
            },
        ),
        now,
    );
    let Response::Governance { proposal_id, .. } = resp else {
        return Err(format!("proposal refused: {resp:?}"));
    };
    for m in 0..2 {
        let ballot = GovRequest::Ballot {
            proposal_id,
            ballot: Ballot::Always(true),
        };
        node.handle_request(member_request(&sim, m, &ballot), now);
    }
    ensure(node.service_status() == Some(ServiceStatus::WaitingForShares), || {
        format!("status after vote {:?}", node.service_status())
    })?;

    let share = |node: &Node, m: usize| -> Result<ShareFile, String> {
        let member = &sim.members()[m];
        let enc = encrypted_share(node.store(), member.id).ok_or("no share recorded")?;
        let share = open_share(&enc, &member.encryption).map_err(|e| e.to_string())?;
        Ok(ShareFile {
            member: member.id,
            share,
        })
    };
    let first = node.handle_request(Request::SubmitShare(share(&node, 0)?), now);
    ensure(matches!(first, Response::ShareAccepted { have: 1, need: 2 }), || {
        format!("first share: {first:?}")
    })?;
    ensure(node.service_status() == Some(ServiceStatus::WaitingForShares), || {
        "one share completed recovery".into()
    })?;
    ensure(node.store().entries(APP_MESSAGES).next().is_none(), || {
        "private state readable with one share".into()
    })?;
    let second = node.handle_request(Request::SubmitShare(share(&node, 1)?), now);
    ensure(matches!(second, Response::Recovered { .. }), || {
        format!("second share: {second:?}")
    })?;
    ensure(node.service_status() == Some(ServiceStatus::Open), || {
        "service did not reopen".into()
    })?;
    ensure(node.ledger_secret() == Some(&old_secret), || {
        "ledger secret differs".into()
    })?;

    // byte-compare every key the recovered service has not rewritten since
    let recovered = node.store().raw_maps();
    let mut compared = 0;
    for (map, keys) in oracle.raw_maps() {
        for (k, v) in keys {
            match recovered.get(map).and_then(|m| m.get(k)) {
                Some(r) if r.version <= c => {
                    ensure(r.value == v.value && r.version == v.version, || {
                        format!("{map} differs at a key")
                    })?;
                    compared += 1;
                }
                Some(_) => {}
                None => return Err(format!("{map} lost a key")),
            }
        }
    }
    for (map, keys) in recovered {
        for (k, r) in keys {
            if r.version <= c && oracle.get(map, k).is_none() {
                return Err(format!("{map} holds a key absent from the oracle"));
            }
        }
    }
    let app_oracle: BTreeMap<_, _> = oracle.entries(APP_MESSAGES).collect();
    let app_recovered: BTreeMap<_, _> = node.store().entries(APP_MESSAGES).collect();
    ensure(!app_oracle.is_empty() && app_oracle == app_recovered, || {
        "application map differs".into()
    })?;

    ensure(receipt.verify(&old_identity), || {
        "old receipt fails against the old identity".into()
    })?;
    ensure(!receipt.verify(&new_identity), || {
        "old receipt verifies against the new identity".into()
    })?;
    Ok(format!(
        "recovered prefix 1..={c} of commit {global_commit} ({compared} keys, {} messages); one share insufficient; new identity; old receipt bound to old identity",
        app_oracle.len()
    ))
}

// ---------------------------------------------------------------- 7

fn audit_mutations() -> Result<String, String> {
    let scn = Scenario {
        name: "audit".into(),
        seed: 3,
        duration_ms: 600,
        drain_ms: 300,
        ..Scenario::default()
    };
    let mut sim = Simulation::new(scn).map_err(|e| e.to_string())?;
    sim.run();
    let identity = sim.service_identity();
    let files = sim.ledger_files(NodeId(0));
    let clean = audit_files(&files, &identity);
    ensure(clean.passed(), || {
        format!("clean ledger fails audit: {:?}", clean.violation)
    })?;

    // byte offset -> seqno of the entry owning it; file headers belong to
    // the chunk's first entry
    let mut owner: Vec<(usize, usize, u64)> = Vec::new();
    for (fi, (_, bytes)) in files.iter().enumerate() {
        let parsed = parse_chunk(bytes);
        ensure(parsed.error.is_none(), || "clean chunk fails to parse".into())?;
        ensure(!parsed.entries.is_empty(), || "empty chunk".into())?;
        let mut cursor = 0;
        for (i, (e, range)) in parsed.entries.iter().enumerate() {
            let start = if i == 0 { 0 } else { range.start };
            for off in start..range.end {
                owner.push((fi, off, e.txid.seqno));
            }
            cursor = range.end;
        }
        ensure(cursor == bytes.len(), || "trailing bytes in chunk".into())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let trials = 1200;
    let mut late = 0;
    for _ in 0..trials {
        let (fi, off, seqno) = owner[rng.gen_range(0..owner.len())];
        let mut mutated = files.clone();
        mutated[fi].1[off] ^= rng.gen_range(1..=255u8);
        let report = audit_files(&mutated, &identity);
        let v = report
            .violation
            .ok_or_else(|| format!("flip at {}:{off} (seqno {seqno}) undetected", mutated[fi].0))?;
        if v.seqno > seqno {
            late += 1;
        }
    }
    ensure(late == 0, || {
        format!("{late} mutations located after the mutated entry")
    })?;
    Ok(format!(
        "{trials} single-byte mutations over {} bytes all detected at or before the entry",
        owner.len()
    ))
}

// ---------------------------------------------------------------- 8

fn governance_node(m: usize) -> (Node, Vec<KeyPair>) {
    let keys: Vec<KeyPair> = (0..m).map(|i| KeyPair::from_seed([i as u8 + 40; 32])).collect();
    let service = KeyPair::from_seed([1; 32]);
    let node_key = KeyPair::from_seed([2; 32]);
    let genesis = Genesis {
        service_key: service,
        ledger_secret: SymmetricSecret([3; 32]),
        nodes: vec![(NodeId(0), node_key.public_id())],
        code_id: "code-v1".into(),
        members: keys
            .iter()
            .enumerate()
            .map(|(i, k)| GenesisMember {
                id: MemberId(i as u64),
                public_id: k.public_id(),
                encryption_key: EncryptionKeyPair::from_seed([i as u8 + 90; 32]).public_key(),
            })
            .collect(),
        users: vec![],
        recovery_threshold: 1,
        constitution: ConstitutionKind::StrictMajority,
        open: true,
    };
    let entries = genesis
        .entries(NodeId(0), &node_key, &mut ChaCha8Rng::seed_from_u64(m as u64))
        .expect("genesis");
    let setup = NodeSetup {
        id: NodeId(0),
        key: node_key,
        code_id: "code-v1".into(),
        consensus: ConsensusConfig::default(),
        snapshot_interval: 0,
        seed: 0,
    };
    let mut node = Node::from_genesis(setup, &genesis, entries);
    node.start_as_primary(0);
    (node, keys)
}

fn governance_thresholds() -> Result<String, String> {
    let sm = ConstitutionKind::StrictMajority;
    let proposal = Proposal { actions: vec![] };
    let mut resolved = 0u64;
    for m in 1..=9usize {
        let members: BTreeSet<MemberId> = (0..m as u64).map(MemberId).collect();
        // 0 = abstain, 1 = for, 2 = against
        for combo in 0..3usize.pow(m as u32) {
            let mut votes = BTreeMap::new();
            let mut x = combo;
            for i in 0..m {
                match x % 3 {
                    1 => {
                        votes.insert(MemberId(i as u64), true);
                    }
                    2 => {
                        votes.insert(MemberId(i as u64), false);
                    }
                    _ => {}
                }
                x /= 3;
            }
            let for_votes = votes.values().filter(|v| **v).count();
            let accepted = sm.resolve(&proposal, &votes, &members) == Resolution::Accepted;
            ensure(accepted == (for_votes > m / 2), || format!("m={m} votes {votes:?}"))?;
            resolved += 1;
        }
    }

    // every for/against sequence through signed requests on a live node
    let mut end_to_end = 0u64;
    for m in 1..=9usize {
        let (mut node, keys) = governance_node(m);
        let mut now = 1000;
        for combo in 0..(1u32 << m) {
            let ballots: Vec<bool> = (0..m).map(|i| combo >> i & 1 == 1).collect();
            let proposal = Proposal {
                actions: vec![Action::new("set_app", json!({ "app": { "combo": combo } }))],
            };
            let req = GovRequest::Propose {
                proposal,
                nonce: combo as u64,
            };
            now += 10;
            let resp = node.handle_request(
                Request::Governance(SignedRequest::sign(MemberId(0), &keys[0], &req)),
                now,
            );
            let Response::Governance { proposal_id, .. } = resp else {
                return Err(format!("m={m}: proposal refused: {resp:?}"));
            };
            let mut last = ProposalStatus::Open;
            for (i, b) in ballots.iter().enumerate() {
                let ballot = GovRequest::Ballot {
                    proposal_id,
                    ballot: Ballot::Always(*b),
                };
                now += 10;
                let r = node.handle_request(
                    Request::Governance(SignedRequest::sign(MemberId(i as u64), &keys[i], &ballot)),
                    now,
                );
                match r {
                    Response::Governance { status, .. } => last = status,
                    Response::Error(e) if e.contains("proposal is") => {}
                    other => return Err(format!("m={m}: ballot refused: {other:?}")),
                }
            }
            let for_votes = ballots.iter().filter(|b| **b).count();
            let want = if for_votes > m / 2 {
                ProposalStatus::Accepted
            } else {
                ProposalStatus::Rejected
            };
            ensure(last == want, || format!("m={m} ballots {ballots:?}: {last:?}"))?;
            end_to_end += 1;
        }
    }
    Ok(format!(
        "{resolved} ballot sets resolved, {end_to_end} proposals voted end to end"
    ))
}

// ---------------------------------------------------------------- 9

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0u32..1 << n)
        .filter(|mask| mask.count_ones() as usize == k)
        .map(|mask| (0..n).filter(|i| mask >> i & 1 == 1).collect())
        .collect()
}

fn secret_sharing() -> Result<String, String> {
    let mut checked = 0;
    for n in 1..=5usize {
        for k in 1..=n {
            let scn = Scenario {
                seed: (n * 10 + k) as u64,
                nodes: 1,
                members: n,
                recovery_threshold: k as u32,
                ..Scenario::default()
            };
            let sim = Simulation::new(scn).map_err(|e| e.to_string())?;
            let store = sim.node(NodeId(0)).ok_or("no node")?.store();
            let wrapped = wrapped_secret(store).ok_or("no wrapped secret")?;
            let shares: Vec<_> = sim
                .members()
                .iter()
                .map(|m| open_share(&encrypted_share(store, m.id).unwrap(), &m.encryption).map(|s| (m.id, s)))
                .collect::<Result<_, _>>()
                .map_err(|e| e.to_string())?;
            for subset in subsets(n, k) {
                let mut c = ShareCollector::new(wrapped.clone());
                let mut done = None;
                for &i in &subset {
                    if let ShareProgress::Complete(s) =
                        c.submit(shares[i].0, shares[i].1.clone()).map_err(|e| e.to_string())?
                    {
                        done = Some(s);
                    }
                }
                ensure(done.as_ref() == Some(sim.ledger_secret()), || {
                    format!("k={k} n={n} {subset:?} failed")
                })?;
                checked += 1;
            }
            if k == 1 {
                continue;
            }
            for subset in subsets(n, k - 1) {
                let mut c = ShareCollector::new(wrapped.clone());
                for &i in &subset {
                    let p = c.submit(shares[i].0, shares[i].1.clone()).map_err(|e| e.to_string())?;
                    ensure(matches!(p, ShareProgress::Waiting { .. }), || {
                        format!("k={k} n={n} {subset:?} completed")
                    })?;
                }
                let few: Vec<_> = subset.iter().map(|&i| shares[i].1.clone()).collect();
                ensure(recover_secret(&few, k).is_err(), || "short share set accepted".into())?;
                // interpolating through too few points gives the wrong key
                let guess = recover_secret(&few, k - 1).map_err(|e| e.to_string())?;
                ensure(unwrap_secret(&wrapped, &guess).is_err(), || {
                    format!("k={k} n={n} {subset:?} unwrapped")
                })?;
                checked += 1;
            }
        }
    }
    // raw splitting of a fixed wrapping key, independent of the service
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let key = [0x5au8; 32];
    for n in 1..=5 {
        for k in 1..=n {
            let parts = split_secret(&key, k, n, &mut rng).map_err(|e| e.to_string())?;
            for subset in subsets(n, k) {
                let chosen: Vec<_> = subset.iter().map(|&i| parts[i].clone()).collect();
                ensure(recover_secret(&chosen, k).ok().as_deref() == Some(&key[..]), || {
                    "split/recover mismatch".into()
                })?;
            }
        }
    }
    Ok(format!("{checked} subsets across k <= n <= 5"))
}

// ---------------------------------------------------------------- 10

type LedgerFiles = Vec<(String, Vec<u8>)>;

fn run_with_files(scn: &Scenario) -> Result<(Vec<u8>, Vec<LedgerFiles>), String> {
    let mut sim = Simulation::new(scn.clone()).map_err(|e| e.to_string())?;
    sim.run();
    let ids: Vec<NodeId> = sim.nodes().keys().copied().collect();
    let files = ids.iter().map(|id| sim.ledger_files(*id)).collect();
    let out = sim.finish();
    Ok((to_jsonl(&out.trace), files))
}

fn determinism() -> Result<String, String> {
    let mut scenarios: Vec<Scenario> = (0..8u64)
        .map(|s| Scenario::adversarial([3, 5, 7, 1][s as usize % 4], s))
        .collect();
    scenarios
        .push(Scenario::from_toml(include_str!("../../../scenarios/availability.toml")).map_err(|e| e.to_string())?);
    scenarios
        .push(Scenario::from_toml(include_str!("../../../scenarios/snapshot_rejoin.toml")).map_err(|e| e.to_string())?);
    let mut bytes = 0;
    for scn in &scenarios {
        let a = run_with_files(scn)?;
        let b = run_with_files(scn)?;
        ensure(a.0 == b.0, || format!("{} seed {}: traces differ", scn.name, scn.seed))?;
        ensure(a.1 == b.1, || format!("{} seed {}: ledgers differ", scn.name, scn.seed))?;
        bytes += a.0.len();
    }
    let mut other = scenarios[0].clone();
    other.seed += 1000;
    ensure(run_with_files(&other)?.0 != run_with_files(&scenarios[0])?.0, || {
        "seed has no effect".into()
    })?;
    Ok(format!(
        "{} scenarios replayed byte-identically ({bytes} trace bytes)",
        scenarios.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, Duration, Check); 10] = [
        ("election vote table", Duration::from_secs(1), vote_table),
        ("merkle proof fixture", Duration::from_secs(1), merkle_fixture),
        ("adversarial safety sweep", Duration::from_secs(600), safety_sweep),
        (
            "availability under primary failure",
            Duration::from_secs(30),
            availability,
        ),
        (
            "signature interval tradeoff",
            Duration::from_secs(120),
            signature_tradeoff,
        ),
        ("disaster recovery", Duration::from_secs(60), disaster_recovery),
        ("ledger audit", Duration::from_secs(120), audit_mutations),
        ("governance thresholds", Duration::from_secs(10), governance_thresholds),
        ("secret sharing", Duration::from_secs(10), secret_sharing),
        ("deterministic replay", Duration::from_secs(30), determinism),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if filter
            .as_ref()
            .is_some_and(|f| !name.contains(f.as_str()) && f != &n.to_string())
        {
            continue;
        }
        let t = Instant::now();
        let result = check();
        let took = t.elapsed();
        let (ok, detail) = match result {
            Ok(d) if took <= *limit => (true, d),
            Ok(d) => (false, format!("{d}; took {took:.1?}, limit {limit:?}")),
            Err(e) => (false, e),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {n}: {} {name} [{took:.2?}] {detail}",
            if ok { "PASS" } else { "FAIL" }
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
