use serde::{Deserialize, Serialize};

use super::{expected_sides, leaf_digest, verify_proof, MerkleProof};
use crate::crypto::{verify, Digest, PublicId, Signature};
use crate::types::TransactionId;

const ROOT_DOMAIN: &[u8] = b"consortium/signed-root/v1";
const ENDORSE_DOMAIN: &[u8] = b"consortium/endorse-node/v1";

/// Bytes a node signs in a signature transaction: the signature entry's own
/// txid, the root over every earlier leaf, and a digest of the remaining
/// payload fields.
pub fn signed_root_message(signature_txid: &TransactionId, root: &Digest, aux: &Digest) -> Vec<u8> {
    let mut msg = Vec::with_capacity(ROOT_DOMAIN.len() + 16 + 64);
    msg.extend_from_slice(ROOT_DOMAIN);
    msg.extend_from_slice(&signature_txid.encode());
    msg.extend_from_slice(&root.0);
    msg.extend_from_slice(&aux.0);
    msg
}

/// Bytes the service identity signs to endorse a node identity.
pub fn endorsement_message(node: &PublicId) -> Vec<u8> {
    [ENDORSE_DOMAIN, &node.0].concat()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedRoot {
    pub signature_txid: TransactionId,
    pub root: Digest,
    pub aux_digest: Digest,
    pub signature: Signature,
    pub node_public_id: PublicId,
}

/// Offline-verifiable evidence that `txid` sits at its ledger position.
///
/// Serialized as JSON with the field order below; byte strings are
/// lowercase hex.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub txid: TransactionId,
    pub write_set_digest: Digest,
    pub claims_digest: Option<Digest>,
    pub proof: MerkleProof,
    pub signed_root: SignedRoot,
    pub node_endorsement: Signature,
}

impl Receipt {
    pub fn leaf(&self) -> Digest {
        leaf_digest(&self.txid, &self.write_set_digest, self.claims_digest.as_ref())
    }

    pub fn verify(&self, service: &PublicId) -> bool {
        let sr = &self.signed_root;
        if !verify(
            service,
            &endorsement_message(&sr.node_public_id),
            &self.node_endorsement,
        ) {
            return false;
        }
        let msg = signed_root_message(&sr.signature_txid, &sr.root, &sr.aux_digest);
        if !verify(&sr.node_public_id, &msg, &sr.signature) {
            return false;
        }
        // the root covers leaves strictly before the signature entry
        let (Some(index), Some(size)) = (self.txid.seqno.checked_sub(1), sr.signature_txid.seqno.checked_sub(1)) else {
            return false;
        };
        if expected_sides(index, size) != Some(self.proof.sides()) {
            return false;
        }
        verify_proof(&self.leaf(), &self.proof, &sr.root)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("receipt serializes")
    }

    pub fn from_json(text: &str) -> Result<Receipt, serde_json::Error> {
        serde_json::from_str(text)
    }
}

pub fn verify_receipt(receipt: &Receipt, service: &PublicId) -> bool {
    receipt.verify(service)
}
