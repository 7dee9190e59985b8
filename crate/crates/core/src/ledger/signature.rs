use super::{EntryKind, LedgerEntry};
use crate::codec::{DecodeError, Reader, Writer};
use crate::crypto::{hash, verify, Digest, KeyPair, PublicId, Signature};
use crate::kvstore::{maps, Update, Visibility, WriteSet};
use crate::merkle::{endorsement_message, signed_root_message};
use crate::types::{NodeId, TransactionId};

pub const SIGNATURE_KEY: &[u8] = b"sig";

/// Contents of a signature transaction, stored under [`SIGNATURE_KEY`] in
/// the signatures map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignaturePayload {
    pub node: NodeId,
    pub public_id: PublicId,
    /// Service identity signature over `public_id`.
    pub endorsement: Signature,
    /// Root over every leaf before the signature entry.
    pub root: Digest,
    pub view_history: Vec<(u64, u64)>,
    pub signature: Signature,
}

impl SignaturePayload {
    fn unsigned_fields(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.node.0).raw(&self.public_id.0).raw(&self.endorsement.0);
        w.u32(self.view_history.len() as u32);
        for (v, s) in &self.view_history {
            w.u64(*v).u64(*s);
        }
        w.finish()
    }

    /// Digest of every field other than the root and signature.
    pub fn aux_digest(&self) -> Digest {
        hash(&self.unsigned_fields())
    }

    pub fn create(
        at: TransactionId,
        node: NodeId,
        key: &KeyPair,
        endorsement: Signature,
        root: Digest,
        view_history: Vec<(u64, u64)>,
    ) -> SignaturePayload {
        let mut p = SignaturePayload {
            node,
            public_id: key.public_id(),
            endorsement,
            root,
            view_history,
            signature: Signature::EMPTY,
        };
        p.signature = key.sign(&signed_root_message(&at, &root, &p.aux_digest()));
        p
    }

    pub fn verify_signature(&self, at: &TransactionId) -> bool {
        verify(
            &self.public_id,
            &signed_root_message(at, &self.root, &self.aux_digest()),
            &self.signature,
        )
    }

    pub fn verify_endorsement(&self, service: &PublicId) -> bool {
        verify(service, &endorsement_message(&self.public_id), &self.endorsement)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(&self.unsigned_fields()).digest(&self.root).raw(&self.signature.0);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<SignaturePayload, DecodeError> {
        let mut r = Reader::new(bytes);
        let node = NodeId(r.u64()?);
        let public_id = PublicId(r.array()?);
        let endorsement = Signature(r.array()?);
        let count = r.u32()?;
        let mut view_history = Vec::new();
        for _ in 0..count {
            view_history.push((r.u64()?, r.u64()?));
        }
        let root = r.digest()?;
        let signature = Signature(r.array()?);
        r.finish()?;
        Ok(SignaturePayload {
            node,
            public_id,
            endorsement,
            root,
            view_history,
            signature,
        })
    }

    pub fn write_set(&self) -> WriteSet {
        let mut ws = WriteSet::new();
        ws.put(maps::SIGNATURES, SIGNATURE_KEY.to_vec(), self.encode());
        ws
    }

    pub fn from_write_set(ws: &WriteSet) -> Option<SignaturePayload> {
        match ws.get(maps::SIGNATURES, SIGNATURE_KEY)? {
            Update::Put(bytes) => SignaturePayload::decode(bytes).ok(),
            Update::Remove => None,
        }
    }
}

impl LedgerEntry {
    pub fn signature(at: TransactionId, payload: &SignaturePayload) -> LedgerEntry {
        LedgerEntry {
            kind: EntryKind::Signature,
            txid: at,
            claims: None,
            public: payload.write_set().encode(Visibility::Public),
            private: Vec::new(),
        }
    }
}
