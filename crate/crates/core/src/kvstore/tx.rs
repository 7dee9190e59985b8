use std::collections::BTreeMap;

use super::{is_framework_map, Store, StoreError, Update, WriteSet};
use crate::types::TransactionId;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Access {
    /// Endpoint code: governance and internal maps are read-only.
    Application,
    Framework,
}

/// A transaction over a stable store version, buffering its writes.
#[derive(Clone)]
pub struct Tx<'a> {
    store: &'a Store,
    access: Access,
    writes: WriteSet,
}

impl<'a> Tx<'a> {
    pub fn new(store: &'a Store, access: Access) -> Tx<'a> {
        Tx {
            store,
            access,
            writes: WriteSet::new(),
        }
    }

    /// Version the transaction reads from.
    pub fn read_version(&self) -> TransactionId {
        self.store.applied()
    }

    pub fn get(&self, map: &str, key: &[u8]) -> Option<Vec<u8>> {
        match self.writes.get(map, key) {
            Some(Update::Put(v)) => Some(v.clone()),
            Some(Update::Remove) => None,
            None => self.store.get(map, key).map(<[u8]>::to_vec),
        }
    }

    /// Committed entries merged with this transaction's own writes.
    pub fn entries(&self, map: &str) -> BTreeMap<Vec<u8>, Vec<u8>> {
        let mut out: BTreeMap<_, _> = self.store.entries(map).map(|(k, v)| (k.to_vec(), v.to_vec())).collect();
        for (k, u) in self.writes.map_updates(map) {
            match u {
                Update::Put(v) => {
                    out.insert(k.to_vec(), v.clone());
                }
                Update::Remove => {
                    out.remove(k);
                }
            }
        }
        out
    }

    fn check(&self, map: &str) -> Result<(), StoreError> {
        if self.access == Access::Application && is_framework_map(map) {
            return Err(StoreError::ReadOnlyMap(map.to_string()));
        }
        Ok(())
    }

    pub fn put(&mut self, map: &str, key: impl Into<Vec<u8>>, value: impl Into<Vec<u8>>) -> Result<(), StoreError> {
        self.check(map)?;
        self.writes.put(map, key, value);
        Ok(())
    }

    pub fn remove(&mut self, map: &str, key: impl Into<Vec<u8>>) -> Result<(), StoreError> {
        self.check(map)?;
        self.writes.remove(map, key);
        Ok(())
    }

    pub fn put_json<T: serde::Serialize>(&mut self, map: &str, key: &str, value: &T) -> Result<(), StoreError> {
        self.put(
            map,
            key.as_bytes().to_vec(),
            serde_json::to_vec(value).expect("value serializes"),
        )
    }

    pub fn write_set(&self) -> &WriteSet {
        &self.writes
    }

    pub fn into_write_set(self) -> WriteSet {
        self.writes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvstore::maps;

    #[test]
    fn read_your_writes() {
        let mut store = Store::new();
        let mut ws = WriteSet::new();
        ws.put("m", b"a".to_vec(), b"1".to_vec());
        store.apply(TransactionId::new(1, 1), &ws).unwrap();
        let mut tx = store.tx(Access::Application);
        tx.put("m", b"b".to_vec(), b"2".to_vec()).unwrap();
        tx.remove("m", b"a".to_vec()).unwrap();
        assert_eq!(tx.get("m", b"b"), Some(b"2".to_vec()));
        assert_eq!(tx.get("m", b"a"), None);
        assert_eq!(tx.entries("m").len(), 1);
        assert_eq!(store.get("m", b"a"), Some(&b"1"[..]));
    }

    #[test]
    fn applications_cannot_write_framework_maps() {
        let store = Store::new();
        let mut tx = store.tx(Access::Application);
        assert!(tx.put(maps::MEMBERS_CERTS, b"m".to_vec(), b"x".to_vec()).is_err());
        assert!(tx.remove(maps::SIGNATURES, b"sig".to_vec()).is_err());
        assert!(tx.put("public:app.index", b"k".to_vec(), b"v".to_vec()).is_ok());
        assert!(tx.get(maps::MEMBERS_CERTS, b"m").is_none());
        let mut fw = store.tx(Access::Framework);
        assert!(fw.put(maps::MEMBERS_CERTS, b"m".to_vec(), b"x".to_vec()).is_ok());
    }
}
