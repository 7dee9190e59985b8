use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::crypto::{hash, verify, Digest, KeyPair, PublicId, Signature};
use crate::kvstore::KvRead;
use crate::types::MemberId;

const REQUEST_DOMAIN: &[u8] = b"consortium/gov-request/v1";

/// One governance action: a vocabulary name and its JSON arguments.
/// Arguments are type-checked when the action is applied.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub name: String,
    pub args: Value,
}

impl Action {
    pub fn new(name: &str, args: Value) -> Action {
        Action {
            name: name.to_string(),
            args,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    pub actions: Vec<Action>,
}

impl Proposal {
    pub fn has_action(&self, name: &str) -> bool {
        self.actions.iter().any(|a| a.name == name)
    }
}

/// A vote expressed as a predicate over the proposal and the current store.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ballot {
    Always(bool),
    /// `vote` when `map[key]` currently equals `equals` (absent when `None`),
    /// otherwise the opposite.
    IfKeyEquals {
        map: String,
        key: String,
        equals: Option<String>,
        vote: bool,
    },
    /// `vote` when the proposal contains an action named `action`.
    IfHasAction {
        action: String,
        vote: bool,
    },
}

impl Ballot {
    pub fn evaluate(&self, proposal: &Proposal, state: &impl KvRead) -> bool {
        match self {
            Ballot::Always(v) => *v,
            Ballot::IfKeyEquals { map, key, equals, vote } => {
                let current = state.read(map, key.as_bytes());
                let matches = current.as_deref() == equals.as_ref().map(String::as_bytes);
                matches == *vote
            }
            Ballot::IfHasAction { action, vote } => proposal.has_action(action) == *vote,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GovRequest {
    /// `nonce` distinguishes otherwise identical proposals.
    Propose {
        proposal: Proposal,
        nonce: u64,
    },
    Ballot {
        proposal_id: Digest,
        ballot: Ballot,
    },
}

/// A governance request with the member signature over its canonical body.
/// Stored verbatim on the ledger.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedRequest {
    pub member: MemberId,
    pub body: String,
    pub signature: Signature,
}

fn signing_bytes(member: MemberId, body: &str) -> Vec<u8> {
    [REQUEST_DOMAIN, &member.0.to_le_bytes(), body.as_bytes()].concat()
}

impl SignedRequest {
    pub fn sign(member: MemberId, key: &KeyPair, request: &GovRequest) -> SignedRequest {
        let body = serde_json::to_string(request).expect("request serializes");
        let signature = key.sign(&signing_bytes(member, &body));
        SignedRequest {
            member,
            body,
            signature,
        }
    }

    pub fn verify(&self, identity: &PublicId) -> bool {
        verify(identity, &signing_bytes(self.member, &self.body), &self.signature)
    }

    pub fn request(&self) -> Result<GovRequest, serde_json::Error> {
        serde_json::from_str(&self.body)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("request serializes")
    }

    pub fn from_json(text: &str) -> Result<SignedRequest, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Identifier of the request: digest of member, body and signature.
    pub fn digest(&self) -> Digest {
        hash(&[&signing_bytes(self.member, &self.body)[..], &self.signature.0].concat())
    }
}
