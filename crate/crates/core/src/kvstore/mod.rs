//! Transactional key-value store over named byte maps.
//!
//! A map is public when its name starts with [`PUBLIC_PREFIX`]; every other
//! map is private and its updates are encrypted on the ledger.

mod snapshot;
mod store;
mod tx;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};

pub use snapshot::{Snapshot, SnapshotError};
pub use store::{Store, Versioned};
pub use tx::{Access, Tx};

pub const PUBLIC_PREFIX: &str = "public:";
pub const GOV_PREFIX: &str = "public:ccf.gov.";
pub const INTERNAL_PREFIX: &str = "public:ccf.internal.";

/// Built-in map names.
pub mod maps {
    pub const USERS_CERTS: &str = "public:ccf.gov.users.certs";
    pub const MEMBERS_CERTS: &str = "public:ccf.gov.members.certs";
    pub const MEMBERS_KEYS: &str = "public:ccf.gov.members_keys";
    pub const NODES_INFO: &str = "public:ccf.gov.nodes.info";
    pub const NODES_CODE_IDS: &str = "public:ccf.gov.nodes.code_ids";
    pub const SERVICE_INFO: &str = "public:ccf.gov.service.info";
    pub const SERVICE_CONFIG: &str = "public:ccf.gov.service.config";
    pub const CONSTITUTION: &str = "public:ccf.gov.constitution";
    pub const PROPOSALS: &str = "public:ccf.gov.proposals";
    pub const PROPOSALS_INFO: &str = "public:ccf.gov.proposals_info";
    pub const HISTORY: &str = "public:ccf.gov.history";
    pub const APP: &str = "public:ccf.gov.app";
    pub const SIGNATURES: &str = "public:ccf.internal.signatures";
    pub const LEDGER_SECRET: &str = "public:ccf.internal.ledger_secret";
    pub const RECOVERY_SHARES: &str = "public:ccf.internal.recovery_shares";
    pub const SNAPSHOT_EVIDENCE: &str = "public:ccf.internal.snapshot_evidence";
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Visibility {
    Public,
    Private,
}

pub fn visibility(map: &str) -> Visibility {
    if map.starts_with(PUBLIC_PREFIX) {
        Visibility::Public
    } else {
        Visibility::Private
    }
}

/// Governance and internal maps: readable by applications, never writable.
pub fn is_framework_map(map: &str) -> bool {
    map.starts_with(GOV_PREFIX) || map.starts_with(INTERNAL_PREFIX)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("expected seqno {expected}, got {got}")]
    Sequencing { expected: u64, got: u64 },
    #[error("cannot roll back to {target}: committed up to {commit}")]
    BelowCommit { target: u64, commit: u64 },
    #[error("cannot roll back to {target}: applied only up to {applied}")]
    AheadOfApplied { target: u64, applied: u64 },
    #[error("map {0} is read-only for this caller")]
    ReadOnlyMap(String),
}

/// Read access shared by committed state and open transactions.
pub trait KvRead {
    fn read(&self, map: &str, key: &[u8]) -> Option<Vec<u8>>;
    fn read_all(&self, map: &str) -> BTreeMap<Vec<u8>, Vec<u8>>;

    fn read_json<T: serde::de::DeserializeOwned>(&self, map: &str, key: &str) -> Option<T> {
        serde_json::from_slice(&self.read(map, key.as_bytes())?).ok()
    }

    /// Every entry of `map` whose key is UTF-8 and value parses as `T`.
    fn read_all_json<T: serde::de::DeserializeOwned>(&self, map: &str) -> BTreeMap<String, T> {
        self.read_all(map)
            .into_iter()
            .filter_map(|(k, v)| Some((String::from_utf8(k).ok()?, serde_json::from_slice(&v).ok()?)))
            .collect()
    }
}

impl KvRead for Store {
    fn read(&self, map: &str, key: &[u8]) -> Option<Vec<u8>> {
        self.get(map, key).map(<[u8]>::to_vec)
    }

    fn read_all(&self, map: &str) -> BTreeMap<Vec<u8>, Vec<u8>> {
        self.entries(map).map(|(k, v)| (k.to_vec(), v.to_vec())).collect()
    }
}

impl KvRead for Tx<'_> {
    fn read(&self, map: &str, key: &[u8]) -> Option<Vec<u8>> {
        self.get(map, key)
    }

    fn read_all(&self, map: &str) -> BTreeMap<Vec<u8>, Vec<u8>> {
        self.entries(map)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Update {
    Put(Vec<u8>),
    Remove,
}

/// Updates produced by one transaction, at most one per `(map, key)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WriteSet {
    maps: BTreeMap<String, BTreeMap<Vec<u8>, Update>>,
}

impl WriteSet {
    pub fn new() -> WriteSet {
        WriteSet::default()
    }

    pub fn put(&mut self, map: &str, key: impl Into<Vec<u8>>, value: impl Into<Vec<u8>>) {
        self.update(map, key.into(), Update::Put(value.into()));
    }

    pub fn remove(&mut self, map: &str, key: impl Into<Vec<u8>>) {
        self.update(map, key.into(), Update::Remove);
    }

    pub fn update(&mut self, map: &str, key: Vec<u8>, update: Update) {
        self.maps.entry(map.to_string()).or_default().insert(key, update);
    }

    pub fn get(&self, map: &str, key: &[u8]) -> Option<&Update> {
        self.maps.get(map).and_then(|m| m.get(key))
    }

    pub fn is_empty(&self) -> bool {
        self.maps.values().all(BTreeMap::is_empty)
    }

    pub fn len(&self) -> usize {
        self.maps.values().map(BTreeMap::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[u8], &Update)> {
        self.maps
            .iter()
            .flat_map(|(m, kv)| kv.iter().map(move |(k, u)| (m.as_str(), k.as_slice(), u)))
    }

    pub fn map_updates(&self, map: &str) -> impl Iterator<Item = (&[u8], &Update)> {
        self.maps
            .get(map)
            .into_iter()
            .flat_map(|kv| kv.iter().map(|(k, u)| (k.as_slice(), u)))
    }

    pub fn touches(&self, map: &str) -> bool {
        self.maps.get(map).is_some_and(|m| !m.is_empty())
    }

    pub fn merge(&mut self, other: WriteSet) {
        for (map, kv) in other.maps {
            self.maps.entry(map).or_default().extend(kv);
        }
    }

    /// Canonical encoding of the updates with the given visibility.
    pub fn encode(&self, vis: Visibility) -> Vec<u8> {
        let selected: Vec<_> = self.iter().filter(|(m, _, _)| visibility(m) == vis).collect();
        let mut w = Writer::new();
        w.u32(selected.len() as u32);
        for (map, key, update) in selected {
            w.bytes(map.as_bytes()).bytes(key);
            match update {
                Update::Remove => {
                    w.u8(0);
                }
                Update::Put(v) => {
                    w.u8(1).bytes(v);
                }
            }
        }
        w.finish()
    }

    /// Strict inverse of [`Self::encode`]: updates must be in canonical
    /// order, unique, and all of visibility `vis`.
    pub fn decode(bytes: &[u8], vis: Visibility) -> Result<WriteSet, DecodeError> {
        let mut r = Reader::new(bytes);
        let count = r.u32()?;
        let mut ws = WriteSet::new();
        let mut last: Option<(String, Vec<u8>)> = None;
        for _ in 0..count {
            let map = r.string()?;
            if visibility(&map) != vis {
                return Err(r.error(format!("map {map} has the wrong visibility")));
            }
            let key = r.bytes()?.to_vec();
            let update = match r.u8()? {
                0 => Update::Remove,
                1 => Update::Put(r.bytes()?.to_vec()),
                op => return Err(r.error(format!("unknown op {op}"))),
            };
            let id = (map, key);
            if last.as_ref().is_some_and(|prev| *prev >= id) {
                return Err(r.error("updates out of canonical order"));
            }
            ws.update(&id.0, id.1.clone(), update);
            last = Some(id);
        }
        r.finish()?;
        Ok(ws)
    }

    /// Splits into (public, private) halves.
    pub fn split(&self) -> (WriteSet, WriteSet) {
        let mut public = WriteSet::new();
        let mut private = WriteSet::new();
        for (map, kv) in &self.maps {
            let target = match visibility(map) {
                Visibility::Public => &mut public,
                Visibility::Private => &mut private,
            };
            target.maps.insert(map.clone(), kv.clone());
        }
        (public, private)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn visibility_follows_prefix() {
        assert_eq!(visibility("public:ccf.gov.users.certs"), Visibility::Public);
        assert_eq!(visibility("app.msgs"), Visibility::Private);
        assert!(is_framework_map(maps::SIGNATURES));
        assert!(!is_framework_map("public:app.index"));
    }

    #[test]
    fn encoding_round_trips_and_rejects_noncanonical() {
        let mut ws = WriteSet::new();
        ws.put("public:a", b"k2".to_vec(), b"v".to_vec());
        ws.remove("public:a", b"k1".to_vec());
        ws.put("secret", b"x".to_vec(), b"y".to_vec());
        let public = ws.encode(Visibility::Public);
        let private = ws.encode(Visibility::Private);
        let mut back = WriteSet::decode(&public, Visibility::Public).unwrap();
        back.merge(WriteSet::decode(&private, Visibility::Private).unwrap());
        assert_eq!(back, ws);
        assert!(WriteSet::decode(&public, Visibility::Private).is_err());
        let mut trailing = public.clone();
        trailing.push(0);
        assert!(WriteSet::decode(&trailing, Visibility::Public).is_err());

        // hand-built frame with keys in descending order
        let mut w = Writer::new();
        w.u32(2);
        w.bytes(b"public:a").bytes(b"k2").u8(0);
        w.bytes(b"public:a").bytes(b"k1").u8(0);
        assert!(WriteSet::decode(&w.finish(), Visibility::Public).is_err());
    }

    #[test]
    fn later_update_to_same_key_wins() {
        let mut ws = WriteSet::new();
        ws.put("m", b"k".to_vec(), b"1".to_vec());
        ws.remove("m", b"k".to_vec());
        assert_eq!(ws.len(), 1);
        assert_eq!(ws.get("m", b"k"), Some(&Update::Remove));
    }
}
