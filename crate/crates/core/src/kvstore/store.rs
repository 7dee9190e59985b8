use std::collections::{BTreeMap, VecDeque};

use super::{StoreError, Tx, Update, WriteSet};
use crate::types::TransactionId;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Versioned {
    pub value: Vec<u8>,
    /// Seqno of the transaction that last wrote this key.
    pub version: u64,
}

type Prior = (String, Vec<u8>, Option<Versioned>);

#[derive(Clone, Debug)]
struct UndoRecord {
    txid: TransactionId,
    prior: Vec<Prior>,
}

/// In-memory map state with an undo log reaching back to the commit point.
#[derive(Clone, Debug, Default)]
pub struct Store {
    maps: BTreeMap<String, BTreeMap<Vec<u8>, Versioned>>,
    applied: TransactionId,
    committed: TransactionId,
    undo: VecDeque<UndoRecord>,
}

impl Store {
    pub fn new() -> Store {
        Store::default()
    }

    /// A store holding `maps` as the committed state at `at`.
    pub fn from_parts(maps: BTreeMap<String, BTreeMap<Vec<u8>, Versioned>>, at: TransactionId) -> Store {
        let mut maps = maps;
        maps.retain(|_, kv| !kv.is_empty());
        Store {
            maps,
            applied: at,
            committed: at,
            undo: VecDeque::new(),
        }
    }

    pub fn applied(&self) -> TransactionId {
        self.applied
    }

    pub fn commit_seqno(&self) -> u64 {
        self.committed.seqno
    }

    pub fn get(&self, map: &str, key: &[u8]) -> Option<&[u8]> {
        self.get_versioned(map, key).map(|v| v.value.as_slice())
    }

    pub fn get_versioned(&self, map: &str, key: &[u8]) -> Option<&Versioned> {
        self.maps.get(map).and_then(|m| m.get(key))
    }

    pub fn entries(&self, map: &str) -> impl Iterator<Item = (&[u8], &[u8])> {
        self.maps
            .get(map)
            .into_iter()
            .flat_map(|m| m.iter().map(|(k, v)| (k.as_slice(), v.value.as_slice())))
    }

    pub fn map_names(&self) -> impl Iterator<Item = &str> {
        self.maps.keys().map(String::as_str)
    }

    pub fn raw_maps(&self) -> &BTreeMap<String, BTreeMap<Vec<u8>, Versioned>> {
        &self.maps
    }

    /// Values without versions, for comparing against replay oracles.
    pub fn contents(&self) -> BTreeMap<String, BTreeMap<Vec<u8>, Vec<u8>>> {
        self.maps
            .iter()
            .map(|(m, kv)| {
                (
                    m.clone(),
                    kv.iter().map(|(k, v)| (k.clone(), v.value.clone())).collect(),
                )
            })
            .collect()
    }

    pub fn tx(&self, access: super::Access) -> Tx<'_> {
        Tx::new(self, access)
    }

    pub fn apply(&mut self, txid: TransactionId, ws: &WriteSet) -> Result<(), StoreError> {
        let expected = self.applied.seqno + 1;
        if txid.seqno != expected {
            return Err(StoreError::Sequencing {
                expected,
                got: txid.seqno,
            });
        }
        let mut prior = Vec::with_capacity(ws.len());
        for (map, key, update) in ws.iter() {
            let kv = self.maps.entry(map.to_string()).or_default();
            let old = match update {
                Update::Put(value) => kv.insert(
                    key.to_vec(),
                    Versioned {
                        value: value.clone(),
                        version: txid.seqno,
                    },
                ),
                Update::Remove => kv.remove(key),
            };
            if kv.is_empty() {
                self.maps.remove(map);
            }
            prior.push((map.to_string(), key.to_vec(), old));
        }
        self.undo.push_back(UndoRecord { txid, prior });
        self.applied = txid;
        Ok(())
    }

    pub fn rollback_to(&mut self, seqno: u64) -> Result<(), StoreError> {
        if seqno < self.committed.seqno {
            return Err(StoreError::BelowCommit {
                target: seqno,
                commit: self.committed.seqno,
            });
        }
        if seqno > self.applied.seqno {
            return Err(StoreError::AheadOfApplied {
                target: seqno,
                applied: self.applied.seqno,
            });
        }
        while self.undo.back().is_some_and(|r| r.txid.seqno > seqno) {
            let record = self.undo.pop_back().expect("checked non-empty");
            for (map, key, old) in record.prior.into_iter().rev() {
                let kv = self.maps.entry(map.clone()).or_default();
                match old {
                    Some(v) => {
                        kv.insert(key, v);
                    }
                    None => {
                        kv.remove(&key);
                    }
                }
                if kv.is_empty() {
                    self.maps.remove(&map);
                }
            }
        }
        self.applied = self.undo.back().map_or(self.committed, |r| r.txid);
        Ok(())
    }

    /// Marks everything up to `seqno` immutable and drops its undo records.
    pub fn commit(&mut self, seqno: u64) {
        let seqno = seqno.min(self.applied.seqno);
        while self.undo.front().is_some_and(|r| r.txid.seqno <= seqno) {
            let record = self.undo.pop_front().expect("checked non-empty");
            self.committed = record.txid;
        }
    }

    /// State as of `seqno` (≥ commit), leaving `self` untouched.
    pub fn at(&self, seqno: u64) -> Result<Store, StoreError> {
        let mut copy = self.clone();
        copy.rollback_to(seqno)?;
        copy.commit(seqno);
        Ok(copy)
    }

    pub fn undo_depth(&self) -> usize {
        self.undo.len()
    }
}
