use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::Value;
use thiserror::Error;

use super::{
    code_allowed, member_key, members, node_info, node_key, service_config, service_info, ConstitutionKind, NodeStatus,
    Proposal, ProposalInfo, ProposalStatus, ServiceConfig, ServiceStatus, ALLOWED_TO_JOIN, APP_KEY, CONFIG_KEY,
    CONSTITUTION_KEY, SERVICE_KEY,
};
use crate::crypto::{Digest, EncryptionPublicKey, KeyPair, PublicId, SymmetricSecret};
use crate::kvstore::{maps, KvRead, StoreError, Tx};
use crate::merkle::endorsement_message;
use crate::recovery::issue_shares;
use crate::types::{MemberId, NodeId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ActionError {
    #[error("unknown action {0}")]
    Unknown(String),
    #[error("{action}: bad arguments: {reason}")]
    BadArgs { action: String, reason: String },
    #[error("{action}: {reason}")]
    Precondition { action: String, reason: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Node-held material some actions need.
pub struct ActionContext<'a> {
    pub proposal_id: Digest,
    pub service_key: Option<&'a KeyPair>,
    pub ledger_secret: Option<&'a SymmetricSecret>,
    pub rng: &'a mut ChaCha8Rng,
}

/// Actions that change the set of trusted nodes.
pub const RECONFIGURING_ACTIONS: &[&str] = &["transition_node_to_trusted", "remove_node"];

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SetUser {
    user_id: String,
    public_id: PublicId,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SetMember {
    member_id: MemberId,
    public_id: PublicId,
    encryption_key: EncryptionPublicKey,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SetApp {
    app: Value,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CodeId {
    code_id: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeArg {
    node_id: NodeId,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SetConstitution {
    constitution: ConstitutionKind,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OpenService {
    previous_identity: Option<PublicId>,
    next_identity: PublicId,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Threshold {
    threshold: u32,
}

fn args<T: DeserializeOwned>(action: &str, value: &Value) -> Result<T, ActionError> {
    serde_json::from_value(value.clone()).map_err(|e| ActionError::BadArgs {
        action: action.to_string(),
        reason: e.to_string(),
    })
}

fn precondition(action: &str, reason: impl Into<String>) -> ActionError {
    ActionError::Precondition {
        action: action.to_string(),
        reason: reason.into(),
    }
}

fn reissue(tx: &mut Tx<'_>, ctx: &mut ActionContext<'_>, threshold: u32, action: &str) -> Result<(), ActionError> {
    let Some(secret) = ctx.ledger_secret else {
        return Err(precondition(action, "ledger secret unavailable"));
    };
    issue_shares(tx, secret, threshold, ctx.rng).map_err(|e| precondition(action, e.to_string()))
}

fn apply_one(tx: &mut Tx<'_>, name: &str, raw: &Value, ctx: &mut ActionContext<'_>) -> Result<(), ActionError> {
    match name {
        "set_user" => {
            let a: SetUser = args(name, raw)?;
            tx.put_json(maps::USERS_CERTS, &a.user_id, &a.public_id)?;
        }
        "set_member" => {
            let a: SetMember = args(name, raw)?;
            tx.put_json(maps::MEMBERS_CERTS, &member_key(a.member_id), &a.public_id)?;
            tx.put_json(maps::MEMBERS_KEYS, &member_key(a.member_id), &a.encryption_key)?;
            if let Some(cfg) = service_config(tx) {
                reissue(tx, ctx, cfg.recovery_threshold, name)?;
            }
        }
        "set_app" => {
            let a: SetApp = args(name, raw)?;
            tx.put_json(maps::APP, APP_KEY, &a.app)?;
        }
        "add_node_code" => {
            let a: CodeId = args(name, raw)?;
            if a.code_id.is_empty() {
                return Err(precondition(name, "empty code id"));
            }
            tx.put_json(maps::NODES_CODE_IDS, &a.code_id, &ALLOWED_TO_JOIN)?;
            invalidate_other_open_proposals(tx, &ctx.proposal_id)?;
        }
        "transition_node_to_trusted" => {
            let a: NodeArg = args(name, raw)?;
            let mut info =
                node_info(tx, a.node_id).ok_or_else(|| precondition(name, format!("unknown node {}", a.node_id)))?;
            if info.status != NodeStatus::Pending {
                return Err(precondition(name, format!("{} is {:?}", a.node_id, info.status)));
            }
            if !code_allowed(tx, &info.code_id) {
                return Err(precondition(name, "node code id is not allowed"));
            }
            let key = ctx
                .service_key
                .ok_or_else(|| precondition(name, "service key unavailable"))?;
            info.status = NodeStatus::Trusted;
            info.endorsement = Some(key.sign(&endorsement_message(&info.public_id)));
            tx.put_json(maps::NODES_INFO, &node_key(a.node_id), &info)?;
        }
        "remove_node" => {
            let a: NodeArg = args(name, raw)?;
            let mut info =
                node_info(tx, a.node_id).ok_or_else(|| precondition(name, format!("unknown node {}", a.node_id)))?;
            if info.status != NodeStatus::Trusted {
                return Err(precondition(name, format!("{} is {:?}", a.node_id, info.status)));
            }
            info.status = NodeStatus::Retiring;
            tx.put_json(maps::NODES_INFO, &node_key(a.node_id), &info)?;
        }
        "set_constitution" => {
            let a: SetConstitution = args(name, raw)?;
            tx.put_json(maps::CONSTITUTION, CONSTITUTION_KEY, &a.constitution)?;
        }
        "transition_service_to_open" => {
            let a: OpenService = args(name, raw)?;
            let mut info = service_info(tx).ok_or_else(|| precondition(name, "no service info"))?;
            if a.next_identity != info.identity {
                return Err(precondition(name, "next identity is not the current service identity"));
            }
            info.status = match info.status {
                ServiceStatus::Opening => ServiceStatus::Open,
                ServiceStatus::Recovering => {
                    if a.previous_identity.is_none() || a.previous_identity != info.previous_identity {
                        return Err(precondition(name, "recovery needs the previous service identity"));
                    }
                    ServiceStatus::WaitingForShares
                }
                other => return Err(precondition(name, format!("service is {other:?}"))),
            };
            tx.put_json(maps::SERVICE_INFO, SERVICE_KEY, &info)?;
        }
        "set_recovery_threshold" => {
            let a: Threshold = args(name, raw)?;
            let count = members(tx).len() as u32;
            if a.threshold == 0 || a.threshold > count {
                return Err(precondition(
                    name,
                    format!("threshold {} with {count} members", a.threshold),
                ));
            }
            tx.put_json(
                maps::SERVICE_CONFIG,
                CONFIG_KEY,
                &ServiceConfig {
                    recovery_threshold: a.threshold,
                },
            )?;
            reissue(tx, ctx, a.threshold, name)?;
        }
        other => return Err(ActionError::Unknown(other.to_string())),
    }
    Ok(())
}

fn invalidate_other_open_proposals(tx: &mut Tx<'_>, current: &Digest) -> Result<(), StoreError> {
    let current = current.to_hex();
    for (id, mut info) in tx.read_all_json::<ProposalInfo>(maps::PROPOSALS_INFO) {
        if id != current && info.status == ProposalStatus::Open {
            info.status = ProposalStatus::Invalidated;
            tx.put_json(maps::PROPOSALS_INFO, &id, &info)?;
        }
    }
    Ok(())
}

/// Applies every action of `proposal` into `tx`. On error `tx` may hold
/// partial writes; callers discard it.
pub fn apply_actions(tx: &mut Tx<'_>, proposal: &Proposal, ctx: &mut ActionContext<'_>) -> Result<(), ActionError> {
    for action in &proposal.actions {
        apply_one(tx, &action.name, &action.args, ctx)?;
    }
    Ok(())
}
