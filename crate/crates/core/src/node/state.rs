use std::collections::BTreeSet;

use crate::consensus::Replica;
use crate::crypto::{Signature, SymmetricSecret};
use crate::governance::{node_info, nodes, trusted_nodes};
use crate::kvstore::{maps, Store};
use crate::ledger::LedgerEntry;
use crate::types::NodeId;

/// The store as seen through consensus. Without the ledger secret only
/// public updates are applied.
pub(crate) struct NodeState {
    pub id: NodeId,
    pub store: Store,
    pub secret: Option<SymmetricSecret>,
}

impl Replica for NodeState {
    fn apply(&mut self, entry: &LedgerEntry) -> Option<BTreeSet<NodeId>> {
        let ws = entry
            .write_set(self.secret.as_ref())
            .expect("replicated entries decode under the ledger secret");
        let before = ws.touches(maps::NODES_INFO).then(|| trusted_nodes(&self.store));
        self.store.apply(entry.txid, &ws).expect("entries apply in sequence");
        let before = before?;
        let after = trusted_nodes(&self.store);
        (after != before).then_some(after)
    }

    fn rollback(&mut self, seqno: u64) {
        self.store.rollback_to(seqno).expect("rollback stays above commit");
    }

    fn commit(&mut self, seqno: u64) {
        self.store.commit(seqno);
    }

    fn learners(&self) -> BTreeSet<NodeId> {
        nodes(&self.store).into_keys().collect()
    }

    fn endorsement(&self) -> Option<Signature> {
        node_info(&self.store, self.id).and_then(|i| i.endorsement)
    }
}
