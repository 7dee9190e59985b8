//! Disaster recovery as a sequence of batch commands.
//!
//! The state directory keeps the surviving ledger, the recovery node's key
//! seed and every request the node accepted; each command rebuilds the node
//! from these and replays the requests in order.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use consortium::consensus::ConsensusConfig;
use consortium::crypto::{KeyPair, PublicId};
use consortium::governance::SignedRequest;
use consortium::node::{Node, NodeSetup, Request, Response};
use consortium::recovery::{encrypted_share, open_share, ShareFile};
use consortium::{NodeId, Time};

use crate::files::{
    read_json, read_ledger_dir, read_service_id, write_files, write_json, write_service_id, MemberKeyFile,
    SERVICE_ID_FILE,
};

const STATE_FILE: &str = "recovery.json";
const INPUT_DIR: &str = "input";
const STEP: Time = 1_000;

#[derive(Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Logged {
    Governance(SignedRequest),
    Share(ShareFile),
}

#[derive(Serialize, Deserialize)]
struct RecoveryState {
    previous_identity: PublicId,
    node_id: NodeId,
    #[serde(with = "hex::serde")]
    node_seed: [u8; 32],
    accepted: Vec<Logged>,
}

fn setup(state: &RecoveryState) -> NodeSetup {
    NodeSetup {
        id: state.node_id,
        key: KeyPair::from_seed(state.node_seed),
        code_id: "code-v1".into(),
        consensus: ConsensusConfig::default(),
        snapshot_interval: 0,
        seed: u64::from_le_bytes(state.node_seed[..8].try_into().expect("8 bytes")),
    }
}

fn to_request(l: &Logged) -> Request {
    match l {
        Logged::Governance(s) => Request::Governance(s.clone()),
        Logged::Share(f) => Request::SubmitShare(f.clone()),
    }
}

fn rebuild(dir: &Path, state: &RecoveryState) -> Result<Node> {
    let files = read_ledger_dir(&dir.join(INPUT_DIR))?;
    let mut node = Node::recover(setup(state), &files, Some(&state.previous_identity), 0)?;
    for (i, l) in state.accepted.iter().enumerate() {
        node.handle_request(to_request(l), (i as Time + 1) * STEP);
    }
    Ok(node)
}

fn describe(node: &Node) -> String {
    format!(
        "service identity {}\nstatus {:?}\nledger {}..={}",
        node.service_identity().map_or("none".into(), |i| i.to_hex()),
        node.service_status(),
        node.ledger().base().seqno + 1,
        node.ledger().last_seqno(),
    )
}

fn save_outputs(dir: &Path, node: &Node) -> Result<()> {
    if let Some(id) = node.service_identity() {
        write_service_id(&dir.join(SERVICE_ID_FILE), &id)?;
    }
    let ledger = dir.join("ledger");
    if ledger.exists() {
        fs::remove_dir_all(&ledger)?;
    }
    write_files(&ledger, &node.ledger_files())
}

pub fn start(ledger_dir: &Path, service_id: &Path, dir: &Path, seed: u64) -> Result<()> {
    if dir.join(STATE_FILE).exists() {
        bail!("{} already holds a recovery", dir.display());
    }
    let files = read_ledger_dir(ledger_dir)?;
    let previous_identity = read_service_id(service_id)?;
    let mut node_seed = [0u8; 32];
    node_seed[..8].copy_from_slice(&seed.to_le_bytes());
    node_seed[8..16].copy_from_slice(b"recovery");
    let state = RecoveryState {
        previous_identity,
        node_id: NodeId(1000),
        node_seed,
        accepted: Vec::new(),
    };
    let node = Node::recover(setup(&state), &files, Some(&previous_identity), 0).context("starting recovery")?;
    fs::create_dir_all(dir)?;
    write_files(&dir.join(INPUT_DIR), &files)?;
    write_json(&dir.join(STATE_FILE), &state)?;
    save_outputs(dir, &node)?;
    println!("{}", describe(&node));
    Ok(())
}

fn submit(dir: &Path, logged: Logged) -> Result<()> {
    let mut state: RecoveryState = read_json(&dir.join(STATE_FILE))?;
    let mut node = rebuild(dir, &state)?;
    let now = (state.accepted.len() as Time + 1) * STEP;
    let resp = node.handle_request(to_request(&logged), now);
    match &resp {
        Response::Governance {
            proposal_id, status, ..
        } => println!("proposal {} is {status:?}", proposal_id.to_hex()),
        Response::ShareAccepted { have, need } => println!("share accepted: {have} of {need}"),
        Response::Recovered { txid } => println!("recovered at {txid}"),
        other => bail!("request refused: {other:?}"),
    }
    state.accepted.push(logged);
    write_json(&dir.join(STATE_FILE), &state)?;
    save_outputs(dir, &node)?;
    println!("{}", describe(&node));
    Ok(())
}

pub fn submit_request(dir: &Path, request: &Path) -> Result<()> {
    submit(dir, Logged::Governance(read_json(request)?))
}

/// Member side: decrypts the member's recorded share into a share file.
pub fn open_member_share(dir: &Path, member_key: &Path, out: &Path) -> Result<()> {
    let state: RecoveryState = read_json(&dir.join(STATE_FILE))?;
    let node = rebuild(dir, &state)?;
    let key: MemberKeyFile = read_json(member_key)?;
    let enc = encrypted_share(node.store(), key.member).with_context(|| format!("no share for {}", key.member))?;
    let share = open_share(&enc, &key.encryption())?;
    write_json(
        out,
        &ShareFile {
            member: key.member,
            share,
        },
    )?;
    println!("wrote share of {} to {}", key.member, out.display());
    Ok(())
}

pub fn submit_share(dir: &Path, share: &Path) -> Result<()> {
    submit(dir, Logged::Share(read_json(share)?))
}

pub fn status(dir: &Path) -> Result<()> {
    let state: RecoveryState = read_json(&dir.join(STATE_FILE))?;
    let node = rebuild(dir, &state)?;
    println!("{}", describe(&node));
    println!("accepted requests {}", state.accepted.len());
    Ok(())
}
