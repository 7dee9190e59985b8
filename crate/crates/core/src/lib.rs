//! Signature-anchored crash-fault-tolerant replication over an
//! integrity-protected Merkle ledger, with a transactional public/private
//! key-value store, offline-verifiable receipts, member governance, k-of-n
//! disaster recovery, and a deterministic discrete-event simulator.

pub mod codec;
pub mod consensus;
pub mod crypto;
pub mod governance;
mod hexser;
pub mod kvstore;
pub mod ledger;
pub mod merkle;
pub mod node;
pub mod recovery;
pub mod sim;
pub mod types;

pub use types::{MemberId, NodeId, Time, TransactionId};
