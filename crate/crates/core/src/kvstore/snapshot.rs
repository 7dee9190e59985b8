use std::collections::BTreeMap;

use thiserror::Error;

use super::{visibility, Store, Versioned, Visibility};
use crate::codec::{DecodeError, Reader, Writer};
use crate::crypto::{aead_decrypt, aead_encrypt, hash, CryptoError, Digest, Nonce, PublicId, SymmetricSecret, SUITE};
use crate::merkle::Receipt;
use crate::types::TransactionId;

const MAGIC: &[u8; 8] = b"KVSNAP\0\x01";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("snapshot carries no receipt")]
    MissingReceipt,
    #[error("snapshot receipt does not verify or does not cover this snapshot")]
    BadReceipt,
    #[error("unsupported snapshot format: {0}")]
    Format(String),
    #[error("private payload: {0}")]
    Crypto(#[from] CryptoError),
}

/// Full store contents at a committed position, with the ledger state needed
/// to resume appending after it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Snapshot {
    pub txid: TransactionId,
    pub maps: BTreeMap<String, BTreeMap<Vec<u8>, Versioned>>,
    /// Merkle peaks over leaves `[1, txid.seqno]`.
    pub frontier: Vec<Digest>,
    /// `(view, first seqno)` pairs up to `txid`.
    pub view_history: Vec<(u64, u64)>,
    pub receipt: Option<Receipt>,
}

fn nonce(seqno: u64) -> Nonce {
    let mut n = [0xff; 12];
    n[4..].copy_from_slice(&seqno.to_le_bytes());
    Nonce(n)
}

fn encode_maps(w: &mut Writer, maps: &BTreeMap<String, BTreeMap<Vec<u8>, Versioned>>, vis: Visibility) {
    let selected: Vec<_> = maps.iter().filter(|(m, _)| visibility(m) == vis).collect();
    w.u32(selected.len() as u32);
    for (name, kv) in selected {
        w.bytes(name.as_bytes()).u32(kv.len() as u32);
        for (k, v) in kv {
            w.bytes(k).bytes(&v.value).u64(v.version);
        }
    }
}

fn decode_maps(
    bytes: &[u8],
    vis: Visibility,
    out: &mut BTreeMap<String, BTreeMap<Vec<u8>, Versioned>>,
) -> Result<(), DecodeError> {
    let mut r = Reader::new(bytes);
    for _ in 0..r.u32()? {
        let name = r.string()?;
        if visibility(&name) != vis {
            return Err(r.error(format!("map {name} has the wrong visibility")));
        }
        let mut kv = BTreeMap::new();
        for _ in 0..r.u32()? {
            let key = r.bytes()?.to_vec();
            let value = r.bytes()?.to_vec();
            let version = r.u64()?;
            kv.insert(key, Versioned { value, version });
        }
        out.insert(name, kv);
    }
    r.finish()
}

impl Snapshot {
    pub fn capture(store: &Store, frontier: Vec<Digest>, view_history: Vec<(u64, u64)>) -> Snapshot {
        Snapshot {
            txid: store.applied(),
            maps: store.raw_maps().clone(),
            frontier,
            view_history,
            receipt: None,
        }
    }

    fn header(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(MAGIC).u32(VERSION).bytes(SUITE.as_bytes());
        w.u64(self.txid.view).u64(self.txid.seqno);
        w.u32(self.frontier.len() as u32);
        for d in &self.frontier {
            w.digest(d);
        }
        w.u32(self.view_history.len() as u32);
        for (v, s) in &self.view_history {
            w.u64(*v).u64(*s);
        }
        w.finish()
    }

    /// Bytes whose digest the snapshot evidence transaction claims.
    pub fn body(&self, secret: &SymmetricSecret) -> Vec<u8> {
        let header = self.header();
        let mut public = Writer::new();
        encode_maps(&mut public, &self.maps, Visibility::Public);
        let mut private = Writer::new();
        encode_maps(&mut private, &self.maps, Visibility::Private);
        let ciphertext = aead_encrypt(secret, &nonce(self.txid.seqno), &private.finish(), &header);
        let mut w = Writer::new();
        w.raw(&header).bytes(&public.finish()).bytes(&ciphertext);
        w.finish()
    }

    pub fn body_digest(&self, secret: &SymmetricSecret) -> Digest {
        hash(&self.body(secret))
    }

    pub fn to_bytes(&self, secret: &SymmetricSecret) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&self.body(secret));
        let receipt = self.receipt.as_ref().map(Receipt::to_json).unwrap_or_default();
        w.bytes(receipt.as_bytes());
        w.finish()
    }

    pub fn into_store(self) -> Store {
        Store::from_parts(self.maps, self.txid)
    }

    /// Parses and checks a snapshot file: its receipt must verify against
    /// `service` and claim exactly this body.
    pub fn from_bytes(bytes: &[u8], service: &PublicId, secret: &SymmetricSecret) -> Result<Snapshot, SnapshotError> {
        let mut outer = Reader::new(bytes);
        let body = outer.bytes()?;
        let receipt_text = outer.bytes()?;
        outer.finish()?;
        if receipt_text.is_empty() {
            return Err(SnapshotError::MissingReceipt);
        }
        let receipt = std::str::from_utf8(receipt_text)
            .ok()
            .and_then(|t| Receipt::from_json(t).ok())
            .ok_or(SnapshotError::BadReceipt)?;
        if !receipt.verify(service) || receipt.claims_digest != Some(hash(body)) {
            return Err(SnapshotError::BadReceipt);
        }

        let mut r = Reader::new(body);
        if r.raw(MAGIC.len())? != MAGIC || r.u32()? != VERSION {
            return Err(SnapshotError::Format("bad magic or version".into()));
        }
        let suite = r.string()?;
        if suite != SUITE {
            return Err(SnapshotError::Format(format!("suite {suite}")));
        }
        let txid = TransactionId::new(r.u64()?, r.u64()?);
        if receipt.txid.seqno <= txid.seqno {
            return Err(SnapshotError::BadReceipt);
        }
        let frontier = (0..r.u32()?).map(|_| r.digest()).collect::<Result<Vec<_>, _>>()?;
        let view_history = (0..r.u32()?)
            .map(|_| Ok((r.u64()?, r.u64()?)))
            .collect::<Result<Vec<_>, DecodeError>>()?;
        let header_end = r.position();
        let public = r.bytes()?;
        let ciphertext = r.bytes()?;
        r.finish()?;
        let private = aead_decrypt(secret, &nonce(txid.seqno), ciphertext, &body[..header_end])?;
        let mut maps = BTreeMap::new();
        decode_maps(public, Visibility::Public, &mut maps)?;
        decode_maps(&private, Visibility::Private, &mut maps)?;
        Ok(Snapshot {
            txid,
            maps,
            frontier,
            view_history,
            receipt: Some(receipt),
        })
    }
}
