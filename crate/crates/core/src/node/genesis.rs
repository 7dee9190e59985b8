use rand_chacha::ChaCha8Rng;

use crate::crypto::{EncryptionPublicKey, KeyPair, PublicId, SymmetricSecret};
use crate::governance::{
    member_key, node_key, ConstitutionKind, NodeInfo, NodeStatus, ServiceConfig, ServiceInfo, ServiceStatus,
    ALLOWED_TO_JOIN, CONFIG_KEY, CONSTITUTION_KEY, SERVICE_KEY,
};
use crate::kvstore::{maps, Access, Store};
use crate::ledger::{EntryKind, LedgerEntry, SignaturePayload};
use crate::merkle::endorsement_message;
use crate::recovery::{issue_shares, RecoveryError};
use crate::types::{MemberId, NodeId, TransactionId};

#[derive(Clone, Debug)]
pub struct GenesisMember {
    pub id: MemberId,
    pub public_id: PublicId,
    pub encryption_key: EncryptionPublicKey,
}

/// Initial service configuration, written as the first ledger entry.
#[derive(Clone)]
pub struct Genesis {
    pub service_key: KeyPair,
    pub ledger_secret: SymmetricSecret,
    pub nodes: Vec<(NodeId, PublicId)>,
    pub code_id: String,
    pub members: Vec<GenesisMember>,
    pub users: Vec<(String, PublicId)>,
    pub recovery_threshold: u32,
    pub constitution: ConstitutionKind,
    /// Open for user traffic immediately rather than waiting for members.
    pub open: bool,
}

impl Genesis {
    /// The configuration entry at 1.1 and the signature over it at 1.2,
    /// signed by `signer`, which must be one of the initial nodes.
    pub fn entries(
        &self,
        signer: NodeId,
        signer_key: &KeyPair,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<LedgerEntry>, RecoveryError> {
        let empty = Store::new();
        let mut tx = empty.tx(Access::Framework);
        let info = ServiceInfo {
            identity: self.service_key.public_id(),
            previous_identity: None,
            status: if self.open {
                ServiceStatus::Open
            } else {
                ServiceStatus::Opening
            },
        };
        tx.put_json(maps::SERVICE_INFO, SERVICE_KEY, &info)?;
        tx.put_json(maps::NODES_CODE_IDS, &self.code_id, &ALLOWED_TO_JOIN)?;
        tx.put_json(maps::CONSTITUTION, CONSTITUTION_KEY, &self.constitution)?;
        for (id, public_id) in &self.nodes {
            let node = NodeInfo {
                public_id: *public_id,
                code_id: self.code_id.clone(),
                status: NodeStatus::Trusted,
                endorsement: Some(self.service_key.sign(&endorsement_message(public_id))),
            };
            tx.put_json(maps::NODES_INFO, &node_key(*id), &node)?;
        }
        for m in &self.members {
            tx.put_json(maps::MEMBERS_CERTS, &member_key(m.id), &m.public_id)?;
            tx.put_json(maps::MEMBERS_KEYS, &member_key(m.id), &m.encryption_key)?;
        }
        for (user, public_id) in &self.users {
            tx.put_json(maps::USERS_CERTS, user, public_id)?;
        }
        if !self.members.is_empty() {
            tx.put_json(
                maps::SERVICE_CONFIG,
                CONFIG_KEY,
                &ServiceConfig {
                    recovery_threshold: self.recovery_threshold,
                },
            )?;
            issue_shares(&mut tx, &self.ledger_secret, self.recovery_threshold, rng)?;
        }
        let ws = tx.into_write_set();
        let first = LedgerEntry::seal(
            EntryKind::Reconfiguration,
            TransactionId::new(1, 1),
            &ws,
            None,
            &self.ledger_secret,
        );
        let at = TransactionId::new(1, 2);
        let mut merkle = crate::merkle::MerkleState::new();
        merkle.append(first.leaf());
        let payload = SignaturePayload::create(
            at,
            signer,
            signer_key,
            self.service_key.sign(&endorsement_message(&signer_key.public_id())),
            merkle.root().expect("one leaf"),
            vec![(1, 1)],
        );
        Ok(vec![first, LedgerEntry::signature(at, &payload)])
    }
}
