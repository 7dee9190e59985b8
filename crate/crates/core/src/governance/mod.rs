//! Member governance: signed proposals and ballots recorded in public maps,
//! resolved by a pluggable constitution and applied atomically.

mod actions;
mod constitution;
mod engine;
mod request;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{Digest, EncryptionPublicKey, PublicId, Signature};
use crate::kvstore::{maps, KvRead, StoreError};
use crate::types::{MemberId, NodeId};

pub use actions::{apply_actions, ActionContext, ActionError};
pub use constitution::{Constitution, ConstitutionKind, Resolution};
pub use engine::{process_request, GovOutcome};
pub use request::{Action, Ballot, GovRequest, Proposal, SignedRequest};

pub const SERVICE_KEY: &str = "service";
pub const CONFIG_KEY: &str = "config";
pub const CONSTITUTION_KEY: &str = "constitution";
pub const APP_KEY: &str = "app";
pub const ALLOWED_TO_JOIN: &str = "AllowedToJoin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NodeStatus {
    Pending,
    Trusted,
    Retiring,
    Retired,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeInfo {
    pub public_id: PublicId,
    pub code_id: String,
    pub status: NodeStatus,
    /// Service identity signature over `public_id`, set once trusted.
    pub endorsement: Option<Signature>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ServiceStatus {
    Opening,
    Open,
    Recovering,
    WaitingForShares,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceInfo {
    pub identity: PublicId,
    pub previous_identity: Option<PublicId>,
    pub status: ServiceStatus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub recovery_threshold: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberInfo {
    pub public_id: PublicId,
    pub encryption_key: EncryptionPublicKey,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProposalStatus {
    Open,
    Accepted,
    Rejected,
    Invalidated,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposalInfo {
    pub proposer: MemberId,
    pub status: ProposalStatus,
    pub ballots: BTreeMap<MemberId, Ballot>,
    /// Ballot results at the last resolution.
    pub votes: BTreeMap<MemberId, bool>,
    pub failure: Option<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GovError {
    #[error("request signature does not verify for {0}")]
    BadSignature(MemberId),
    #[error("{0} is not a member")]
    UnknownMember(MemberId),
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error("unknown proposal {0}")]
    UnknownProposal(Digest),
    #[error("proposal is {0:?}")]
    Closed(ProposalStatus),
    #[error("{0} already voted")]
    DoubleVote(MemberId),
    #[error("a reconfiguration is still pending; retry later")]
    ReconfigurationPending,
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub fn member_key(id: MemberId) -> String {
    id.0.to_string()
}

pub fn node_key(id: NodeId) -> String {
    id.0.to_string()
}

/// Members with both a signing identity and an encryption key on record.
pub fn members(state: &impl KvRead) -> BTreeMap<MemberId, MemberInfo> {
    let keys = state.read_all_json::<EncryptionPublicKey>(maps::MEMBERS_KEYS);
    state
        .read_all_json::<PublicId>(maps::MEMBERS_CERTS)
        .into_iter()
        .filter_map(|(k, public_id)| {
            let encryption_key = *keys.get(&k)?;
            Some((
                MemberId(k.parse().ok()?),
                MemberInfo {
                    public_id,
                    encryption_key,
                },
            ))
        })
        .collect()
}

pub fn member_identity(state: &impl KvRead, id: MemberId) -> Option<PublicId> {
    state.read_json(maps::MEMBERS_CERTS, &member_key(id))
}

pub fn nodes(state: &impl KvRead) -> BTreeMap<NodeId, NodeInfo> {
    state
        .read_all_json::<NodeInfo>(maps::NODES_INFO)
        .into_iter()
        .filter_map(|(k, v)| Some((NodeId(k.parse().ok()?), v)))
        .collect()
}

pub fn node_info(state: &impl KvRead, id: NodeId) -> Option<NodeInfo> {
    state.read_json(maps::NODES_INFO, &node_key(id))
}

pub fn trusted_nodes(state: &impl KvRead) -> BTreeSet<NodeId> {
    nodes(state)
        .into_iter()
        .filter(|(_, n)| n.status == NodeStatus::Trusted)
        .map(|(id, _)| id)
        .collect()
}

pub fn service_info(state: &impl KvRead) -> Option<ServiceInfo> {
    state.read_json(maps::SERVICE_INFO, SERVICE_KEY)
}

pub fn service_config(state: &impl KvRead) -> Option<ServiceConfig> {
    state.read_json(maps::SERVICE_CONFIG, CONFIG_KEY)
}

pub fn constitution(state: &impl KvRead) -> ConstitutionKind {
    state
        .read_json(maps::CONSTITUTION, CONSTITUTION_KEY)
        .unwrap_or_default()
}

pub fn proposal_info(state: &impl KvRead, id: &Digest) -> Option<ProposalInfo> {
    state.read_json(maps::PROPOSALS_INFO, &id.to_hex())
}

pub fn code_allowed(state: &impl KvRead, code_id: &str) -> bool {
    state.read_json::<String>(maps::NODES_CODE_IDS, code_id).as_deref() == Some(ALLOWED_TO_JOIN)
}
