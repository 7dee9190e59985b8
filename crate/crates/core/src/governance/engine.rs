use std::collections::BTreeSet;

use super::actions::RECONFIGURING_ACTIONS;
use super::{
    apply_actions, constitution, member_identity, members, proposal_info, ActionContext, Constitution, GovError,
    GovRequest, Proposal, ProposalInfo, ProposalStatus, Resolution, SignedRequest,
};
use crate::crypto::Digest;
use crate::kvstore::{maps, KvRead, Tx};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GovOutcome {
    pub proposal_id: Digest,
    pub status: ProposalStatus,
    /// False when the request repeated an already recorded proposal.
    pub recorded: bool,
}

/// Validates and executes one member request inside `tx`.
///
/// `reconfiguration_pending` rejects any acceptance that would change the
/// trusted node set while an earlier change is uncommitted; the caller
/// should not append anything for a rejected request.
pub fn process_request(
    tx: &mut Tx<'_>,
    signed: &SignedRequest,
    ctx: &mut ActionContext<'_>,
    reconfiguration_pending: bool,
) -> Result<GovOutcome, GovError> {
    let identity = member_identity(tx, signed.member).ok_or(GovError::UnknownMember(signed.member))?;
    if !signed.verify(&identity) {
        return Err(GovError::BadSignature(signed.member));
    }
    let request = signed.request().map_err(|e| GovError::Malformed(e.to_string()))?;
    let request_json = serde_json::to_vec(signed).expect("request serializes");
    let (proposal_id, proposal) = match request {
        GovRequest::Propose { proposal, .. } => {
            let id = signed.digest();
            if let Some(info) = proposal_info(tx, &id) {
                return Ok(GovOutcome {
                    proposal_id: id,
                    status: info.status,
                    recorded: false,
                });
            }
            tx.put(maps::PROPOSALS, id.to_hex().into_bytes(), request_json.clone())?;
            tx.put_json(
                maps::PROPOSALS_INFO,
                &id.to_hex(),
                &ProposalInfo {
                    proposer: signed.member,
                    status: ProposalStatus::Open,
                    ballots: Default::default(),
                    votes: Default::default(),
                    failure: None,
                },
            )?;
            (id, proposal)
        }
        GovRequest::Ballot { proposal_id, ballot } => {
            let mut info = proposal_info(tx, &proposal_id).ok_or(GovError::UnknownProposal(proposal_id))?;
            if info.status != ProposalStatus::Open {
                return Err(GovError::Closed(info.status));
            }
            if info.ballots.contains_key(&signed.member) {
                return Err(GovError::DoubleVote(signed.member));
            }
            info.ballots.insert(signed.member, ballot);
            tx.put_json(maps::PROPOSALS_INFO, &proposal_id.to_hex(), &info)?;
            (proposal_id, stored_proposal(tx, &proposal_id)?)
        }
    };
    tx.put(maps::HISTORY, signed.digest().to_hex().into_bytes(), request_json)?;
    let status = resolve(tx, &proposal_id, &proposal, ctx, reconfiguration_pending)?;
    Ok(GovOutcome {
        proposal_id,
        status,
        recorded: true,
    })
}

fn stored_proposal(tx: &Tx<'_>, id: &Digest) -> Result<Proposal, GovError> {
    let raw = tx
        .read(maps::PROPOSALS, id.to_hex().as_bytes())
        .ok_or(GovError::UnknownProposal(*id))?;
    let signed: SignedRequest = serde_json::from_slice(&raw).map_err(|e| GovError::Malformed(e.to_string()))?;
    match signed.request() {
        Ok(GovRequest::Propose { proposal, .. }) => Ok(proposal),
        _ => Err(GovError::Malformed("stored proposal is not a proposal".into())),
    }
}

fn resolve(
    tx: &mut Tx<'_>,
    id: &Digest,
    proposal: &Proposal,
    ctx: &mut ActionContext<'_>,
    reconfiguration_pending: bool,
) -> Result<ProposalStatus, GovError> {
    let mut info = proposal_info(tx, id).ok_or(GovError::UnknownProposal(*id))?;
    info.votes = info
        .ballots
        .iter()
        .map(|(m, b)| (*m, b.evaluate(proposal, tx)))
        .collect();
    let active: BTreeSet<_> = members(tx).into_keys().collect();
    info.status = match constitution(tx).resolve(proposal, &info.votes, &active) {
        Resolution::Open => ProposalStatus::Open,
        Resolution::Rejected => ProposalStatus::Rejected,
        Resolution::Accepted => {
            if reconfiguration_pending && RECONFIGURING_ACTIONS.iter().any(|a| proposal.has_action(a)) {
                return Err(GovError::ReconfigurationPending);
            }
            let before = tx.clone();
            ctx.proposal_id = *id;
            match apply_actions(tx, proposal, ctx) {
                Ok(()) => ProposalStatus::Accepted,
                Err(e) => {
                    *tx = before;
                    info.failure = Some(e.to_string());
                    ProposalStatus::Failed
                }
            }
        }
    };
    tx.put_json(maps::PROPOSALS_INFO, &id.to_hex(), &info)?;
    Ok(info.status)
}
