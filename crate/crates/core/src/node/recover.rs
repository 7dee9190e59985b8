use std::collections::BTreeSet;

use super::{Node, NodeEvent, NodeSetup, Response};
use crate::consensus::Configuration;
use crate::crypto::{KeyPair, PublicId, SymmetricSecret};
use crate::governance::{
    node_key, nodes, service_config, service_info, NodeInfo, NodeStatus, ServiceInfo, ServiceStatus, SERVICE_KEY,
};
use crate::kvstore::{maps, Access, Store};
use crate::ledger::{verify_files, EntryKind, Ledger};
use crate::merkle::endorsement_message;
use crate::recovery::{
    encrypted_share, issue_shares, wrapped_secret, RecoveryError, ShareCollector, ShareFile, ShareProgress,
};
use crate::types::{Time, TransactionId};

impl Node {
    /// Starts a replacement service from the ledger files of a lost one.
    ///
    /// Only public state is available until members submit enough recovery
    /// shares; the service runs under a fresh identity that records the old
    /// one as its predecessor.
    pub fn recover(
        setup: NodeSetup,
        files: &[(String, Vec<u8>)],
        expected: Option<&PublicId>,
        now: Time,
    ) -> Result<Node, RecoveryError> {
        let (report, entries) = verify_files(files, expected);
        if entries.is_empty() || !report.trusted_identity_in_chain {
            return Err(RecoveryError::NoValidSignature);
        }
        let mut ledger = Ledger::new();
        let mut store = Store::new();
        for e in entries {
            let ws = e.public_write_set().map_err(|_| RecoveryError::NoValidSignature)?;
            store.apply(e.txid, &ws)?;
            ledger.append(e).map_err(|_| RecoveryError::NoValidSignature)?;
        }
        let last = ledger.last_txid();
        ledger.set_commit(last.seqno);
        store.commit(last.seqno);
        let previous = service_info(&store).ok_or(RecoveryError::NoValidSignature)?;
        let configs = vec![Configuration {
            seqno: last.seqno,
            nodes: BTreeSet::from([setup.id]),
        }];
        let mut node = Node::blank(setup, ledger, configs, store);
        node.joined = true;
        let service_key = KeyPair::generate(&mut node.rng);
        node.consensus.start_view(last.view + 1, now);

        let mut tx = node.state.store.tx(Access::Framework);
        for (id, mut info) in nodes(&tx) {
            if id != node.id && info.status != NodeStatus::Retired {
                info.status = NodeStatus::Retired;
                tx.put_json(maps::NODES_INFO, &node_key(id), &info)?;
            }
        }
        let me = NodeInfo {
            public_id: node.key.public_id(),
            code_id: node.code_id.clone(),
            status: NodeStatus::Trusted,
            endorsement: Some(service_key.sign(&endorsement_message(&node.key.public_id()))),
        };
        tx.put_json(maps::NODES_INFO, &node_key(node.id), &me)?;
        let info = ServiceInfo {
            identity: service_key.public_id(),
            previous_identity: Some(previous.identity),
            status: ServiceStatus::Recovering,
        };
        tx.put_json(maps::SERVICE_INFO, SERVICE_KEY, &info)?;
        let ws = tx.into_write_set();
        node.service_key = Some(service_key);
        node.append(EntryKind::Reconfiguration, &ws, None, now);
        node.consensus.sign(now, &mut node.state);
        node.drain_consensus();
        node.events.push(NodeEvent::Recovery {
            status: ServiceStatus::Recovering,
        });
        Ok(node)
    }

    pub(super) fn submit_share(&mut self, file: ShareFile, now: Time) -> Response {
        if !self.is_primary() {
            return Response::NotPrimary {
                primary: self.primary(),
            };
        }
        if self.service_status() != Some(ServiceStatus::WaitingForShares) {
            return Response::Unavailable(RecoveryError::NotAwaitingShares.to_string());
        }
        if encrypted_share(&self.state.store, file.member).is_none() {
            return Response::Error(RecoveryError::NotAShareholder(file.member).to_string());
        }
        if self.shares.is_none() {
            let Some(wrapped) = wrapped_secret(&self.state.store) else {
                return Response::Error(RecoveryError::NoWrappedSecret.to_string());
            };
            self.shares = Some(ShareCollector::new(wrapped));
        }
        let collector = self.shares.as_mut().expect("set above");
        match collector.submit(file.member, file.share) {
            Ok(ShareProgress::Waiting { have, need }) => Response::ShareAccepted { have, need },
            Ok(ShareProgress::Complete(secret)) => match self.complete_recovery(secret, now) {
                Ok(txid) => Response::Recovered { txid },
                Err(e) => Response::Error(e.to_string()),
            },
            Err(e) => Response::Error(e.to_string()),
        }
    }

    /// Replays the ledger with private state, then reopens the service and
    /// issues fresh shares of the same ledger secret.
    fn complete_recovery(&mut self, secret: SymmetricSecret, now: Time) -> Result<TransactionId, RecoveryError> {
        let mut store = Store::new();
        for e in self.ledger().entries() {
            let ws = e.write_set(Some(&secret)).map_err(|_| RecoveryError::RejectedShare)?;
            store.apply(e.txid, &ws)?;
        }
        store.commit(self.commit_seqno());
        self.state.store = store;
        self.state.secret = Some(secret.clone());
        self.shares = None;

        let mut tx = self.state.store.tx(Access::Framework);
        let mut info = service_info(&tx).ok_or(RecoveryError::NotAwaitingShares)?;
        info.status = ServiceStatus::Open;
        tx.put_json(maps::SERVICE_INFO, SERVICE_KEY, &info)?;
        if let Some(cfg) = service_config(&tx) {
            issue_shares(&mut tx, &secret, cfg.recovery_threshold, &mut self.rng)?;
        }
        let ws = tx.into_write_set();
        let txid = self.append(EntryKind::Governance, &ws, None, now);
        self.consensus.sign(now, &mut self.state);
        self.drain_consensus();
        self.events.push(NodeEvent::Recovery {
            status: ServiceStatus::Open,
        });
        Ok(txid)
    }
}
