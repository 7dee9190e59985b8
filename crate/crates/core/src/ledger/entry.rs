use serde::{Deserialize, Serialize};

use crate::codec::{DecodeError, Reader, Writer};
use crate::crypto::{aead_decrypt, aead_encrypt, hash_concat, CryptoError, Digest, Nonce, SymmetricSecret};
use crate::kvstore::{Visibility, WriteSet};
use crate::merkle::leaf_digest;
use crate::types::TransactionId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    User,
    Signature,
    Reconfiguration,
    Governance,
}

impl EntryKind {
    pub fn code(self) -> u8 {
        match self {
            EntryKind::User => 0,
            EntryKind::Signature => 1,
            EntryKind::Reconfiguration => 2,
            EntryKind::Governance => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<EntryKind> {
        Some(match code {
            0 => EntryKind::User,
            1 => EntryKind::Signature,
            2 => EntryKind::Reconfiguration,
            3 => EntryKind::Governance,
            _ => return None,
        })
    }
}

/// AEAD nonce for the private payload of `txid`: view and seqno are packed
/// injectively, with view `u32::MAX` reserved for snapshots.
pub fn entry_nonce(txid: &TransactionId) -> Nonce {
    let view = u32::try_from(txid.view)
        .ok()
        .filter(|v| *v != u32::MAX)
        .expect("view fits the nonce layout");
    let mut n = [0u8; 12];
    n[..4].copy_from_slice(&view.to_le_bytes());
    n[4..].copy_from_slice(&txid.seqno.to_le_bytes());
    Nonce(n)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LedgerEntry {
    pub kind: EntryKind,
    pub txid: TransactionId,
    pub claims: Option<Digest>,
    /// Encoded public updates, in plaintext.
    pub public: Vec<u8>,
    /// AEAD ciphertext of the encoded private updates; empty when there are none.
    pub private: Vec<u8>,
}

impl LedgerEntry {
    /// Builds an entry from a write-set, encrypting its private half.
    pub fn seal(
        kind: EntryKind,
        txid: TransactionId,
        ws: &WriteSet,
        claims: Option<Digest>,
        secret: &SymmetricSecret,
    ) -> LedgerEntry {
        let mut entry = LedgerEntry {
            kind,
            txid,
            claims,
            public: ws.encode(Visibility::Public),
            private: Vec::new(),
        };
        let (_, private) = ws.split();
        if !private.is_empty() {
            let plain = private.encode(Visibility::Private);
            entry.private = aead_encrypt(secret, &entry_nonce(&txid), &plain, &entry.header());
        }
        entry
    }

    /// Authenticated data bound to the private payload.
    pub fn header(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(self.kind.code()).u64(self.txid.view).u64(self.txid.seqno);
        self.write_claims(&mut w);
        w.bytes(&self.public);
        w.finish()
    }

    fn write_claims(&self, w: &mut Writer) {
        match &self.claims {
            Some(c) => w.u8(1).digest(c),
            None => w.u8(0).digest(&Digest::ZERO),
        };
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(&self.header()).bytes(&self.private);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<LedgerEntry, DecodeError> {
        let mut r = Reader::new(bytes);
        let code = r.u8()?;
        let kind = EntryKind::from_code(code).ok_or_else(|| r.error(format!("unknown entry kind {code}")))?;
        let txid = TransactionId::new(r.u64()?, r.u64()?);
        let flag = r.u8()?;
        let claims = r.digest()?;
        let claims = match flag {
            0 if claims == Digest::ZERO => None,
            1 => Some(claims),
            _ => return Err(r.error("malformed claims field")),
        };
        let public = r.bytes()?.to_vec();
        let private = r.bytes()?.to_vec();
        r.finish()?;
        Ok(LedgerEntry {
            kind,
            txid,
            claims,
            public,
            private,
        })
    }

    pub fn write_set_digest(&self) -> Digest {
        let mut w = Writer::new();
        w.u8(self.kind.code()).bytes(&self.public).bytes(&self.private);
        hash_concat(&[&w.finish()])
    }

    pub fn leaf(&self) -> Digest {
        leaf_digest(&self.txid, &self.write_set_digest(), self.claims.as_ref())
    }

    pub fn public_write_set(&self) -> Result<WriteSet, DecodeError> {
        WriteSet::decode(&self.public, Visibility::Public)
    }

    pub fn private_write_set(&self, secret: &SymmetricSecret) -> Result<WriteSet, EntryError> {
        if self.private.is_empty() {
            return Ok(WriteSet::new());
        }
        let plain = aead_decrypt(secret, &entry_nonce(&self.txid), &self.private, &self.header())?;
        Ok(WriteSet::decode(&plain, Visibility::Private)?)
    }

    /// Full write-set, or only its public half when no secret is available.
    pub fn write_set(&self, secret: Option<&SymmetricSecret>) -> Result<WriteSet, EntryError> {
        let mut ws = self.public_write_set()?;
        if let Some(secret) = secret {
            ws.merge(self.private_write_set(secret)?);
        }
        Ok(ws)
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum EntryError {
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}
