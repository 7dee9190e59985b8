//! The replicated ledger: entry encoding, signature transactions, Merkle
//! bookkeeping, transaction status, chunk files and offline audit.

mod audit;
mod entry;
mod files;
mod signature;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::Digest;
use crate::merkle::{MerkleState, Receipt, SignedRoot};
use crate::types::TransactionId;

pub(crate) use audit::verify_files;
pub use audit::{audit_dir, audit_files, AuditReport, GovernanceEvent, Violation};
pub use entry::{entry_nonce, EntryError, EntryKind, LedgerEntry};
pub use files::{
    chunk_file_name, parse_chunk, read_dir_chunks, write_chunks, Chunk, ParsedChunk, FILE_MAGIC, FILE_VERSION,
};
pub use signature::{SignaturePayload, SIGNATURE_KEY};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("expected seqno {expected}, got {got}")]
    Gap { expected: u64, got: u64 },
    #[error("view {got} regresses below {last}")]
    ViewRegression { last: u64, got: u64 },
    #[error("cannot truncate to {target}: committed up to {commit}")]
    BelowCommit { target: u64, commit: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransactionStatus {
    Unknown,
    Pending,
    Committed,
    Invalid,
}

impl TransactionStatus {
    pub fn is_final(self) -> bool {
        matches!(self, TransactionStatus::Committed | TransactionStatus::Invalid)
    }
}

/// One node's ledger. Entries at or below `base` were absorbed from a
/// snapshot and are represented only by the Merkle frontier.
#[derive(Clone, Debug, Default)]
pub struct Ledger {
    base: TransactionId,
    entries: Vec<LedgerEntry>,
    merkle: MerkleState,
    signatures: Vec<TransactionId>,
    view_history: Vec<(u64, u64)>,
    commit: u64,
}

impl Ledger {
    pub fn new() -> Ledger {
        Ledger::default()
    }

    /// Ledger resuming after a snapshot taken at the signature `at`.
    pub fn from_snapshot(at: TransactionId, frontier: &[Digest], view_history: Vec<(u64, u64)>) -> Option<Ledger> {
        Some(Ledger {
            base: at,
            entries: Vec::new(),
            merkle: MerkleState::from_frontier(at.seqno, frontier)?,
            signatures: vec![at],
            view_history,
            commit: at.seqno,
        })
    }

    pub fn base(&self) -> TransactionId {
        self.base
    }

    pub fn last_txid(&self) -> TransactionId {
        self.entries.last().map_or(self.base, |e| e.txid)
    }

    pub fn last_seqno(&self) -> u64 {
        self.last_txid().seqno
    }

    pub fn commit_seqno(&self) -> u64 {
        self.commit
    }

    pub fn merkle(&self) -> &MerkleState {
        &self.merkle
    }

    pub fn view_history(&self) -> &[(u64, u64)] {
        &self.view_history
    }

    pub fn view_history_upto(&self, seqno: u64) -> Vec<(u64, u64)> {
        self.view_history.iter().copied().filter(|(_, s)| *s <= seqno).collect()
    }

    pub fn get(&self, seqno: u64) -> Option<&LedgerEntry> {
        let idx = seqno.checked_sub(self.base.seqno + 1)?;
        self.entries.get(idx as usize)
    }

    /// Entries with seqno in `[from, to]` that are held locally.
    pub fn range(&self, from: u64, to: u64) -> &[LedgerEntry] {
        let lo = from.max(self.base.seqno + 1);
        let hi = to.min(self.last_seqno());
        if lo > hi {
            return &[];
        }
        let start = (lo - self.base.seqno - 1) as usize;
        let end = (hi - self.base.seqno) as usize;
        &self.entries[start..end]
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    /// View of the entry at `seqno`, from the entry or the view history.
    pub fn view_at(&self, seqno: u64) -> Option<u64> {
        if seqno == 0 {
            return Some(0);
        }
        if seqno > self.last_seqno() {
            return None;
        }
        if let Some(e) = self.get(seqno) {
            return Some(e.txid.view);
        }
        if seqno == self.base.seqno {
            return Some(self.base.view);
        }
        self.view_history
            .iter()
            .rev()
            .find(|(_, s)| *s <= seqno)
            .map(|(v, _)| *v)
    }

    /// Whether this ledger holds `txid`.
    pub fn matches(&self, txid: &TransactionId) -> bool {
        self.view_at(txid.seqno) == Some(txid.view)
    }

    pub fn last_signature(&self) -> TransactionId {
        self.signatures.last().copied().unwrap_or(TransactionId::ORIGIN)
    }

    pub fn last_signature_at_or_below(&self, seqno: u64) -> TransactionId {
        let i = self.signatures.partition_point(|t| t.seqno <= seqno);
        if i == 0 {
            TransactionId::ORIGIN
        } else {
            self.signatures[i - 1]
        }
    }

    pub fn signature_after(&self, seqno: u64) -> Option<TransactionId> {
        let i = self.signatures.partition_point(|t| t.seqno <= seqno);
        self.signatures.get(i).copied()
    }

    pub fn signatures(&self) -> &[TransactionId] {
        &self.signatures
    }

    /// Root a signature entry appended next would carry.
    pub fn pending_root(&self) -> Digest {
        self.merkle.root().unwrap_or(Digest::ZERO)
    }

    pub fn append(&mut self, entry: LedgerEntry) -> Result<(), LedgerError> {
        let last = self.last_txid();
        if entry.txid.seqno != last.seqno + 1 {
            return Err(LedgerError::Gap {
                expected: last.seqno + 1,
                got: entry.txid.seqno,
            });
        }
        if entry.txid.view < last.view {
            return Err(LedgerError::ViewRegression {
                last: last.view,
                got: entry.txid.view,
            });
        }
        if entry.txid.view > last.view {
            self.view_history.push((entry.txid.view, entry.txid.seqno));
        }
        self.merkle.append(entry.leaf());
        if entry.kind == EntryKind::Signature {
            self.signatures.push(entry.txid);
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Drops entries after `seqno`.
    pub fn truncate(&mut self, seqno: u64) -> Result<(), LedgerError> {
        if seqno < self.commit {
            return Err(LedgerError::BelowCommit {
                target: seqno,
                commit: self.commit,
            });
        }
        if seqno >= self.last_seqno() {
            return Ok(());
        }
        self.entries.truncate((seqno - self.base.seqno) as usize);
        self.merkle
            .truncate(seqno)
            .expect("truncation stays above the snapshot base");
        self.signatures.retain(|t| t.seqno <= seqno);
        self.view_history.retain(|(_, s)| *s <= seqno);
        Ok(())
    }

    pub fn set_commit(&mut self, seqno: u64) {
        debug_assert!(seqno <= self.last_seqno());
        self.commit = self.commit.max(seqno);
    }

    pub fn status(&self, txid: &TransactionId) -> TransactionStatus {
        if txid.seqno == 0 {
            return TransactionStatus::Unknown;
        }
        let local_view = self.view_at(txid.seqno);
        if txid.seqno <= self.commit {
            return if local_view == Some(txid.view) {
                TransactionStatus::Committed
            } else {
                TransactionStatus::Invalid
            };
        }
        if local_view == Some(txid.view) {
            return TransactionStatus::Pending;
        }
        // a committed entry from a later view precedes this position
        if self.commit > 0 && self.view_at(self.commit).is_some_and(|v| v > txid.view) {
            return TransactionStatus::Invalid;
        }
        TransactionStatus::Unknown
    }

    /// Receipt for `seqno` from the first signature after it.
    pub fn receipt(&self, seqno: u64) -> Option<Receipt> {
        let entry = self.get(seqno)?;
        let sig_txid = self.signature_after(seqno)?;
        let sig_entry = self.get(sig_txid.seqno)?;
        let payload = SignaturePayload::from_write_set(&sig_entry.public_write_set().ok()?)?;
        let proof = self.merkle.proof_at(seqno - 1, sig_txid.seqno - 1).ok()?;
        Some(Receipt {
            txid: entry.txid,
            write_set_digest: entry.write_set_digest(),
            claims_digest: entry.claims,
            proof,
            signed_root: SignedRoot {
                signature_txid: sig_txid,
                root: payload.root,
                aux_digest: payload.aux_digest(),
                signature: payload.signature,
                node_public_id: payload.public_id,
            },
            node_endorsement: payload.endorsement,
        })
    }

    /// Chunk files for entries up to `upto`, closing a chunk after each
    /// signature entry. Entries past the last closed chunk are not written.
    pub fn chunks(&self, upto: u64) -> Vec<Chunk> {
        let mut out = Vec::new();
        let mut current: Vec<&LedgerEntry> = Vec::new();
        for e in self.range(self.base.seqno + 1, upto) {
            current.push(e);
            if e.kind == EntryKind::Signature {
                out.push(Chunk::from_entries(&current));
                current.clear();
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{KeyPair, SymmetricSecret};
    use crate::kvstore::WriteSet;
    use crate::merkle::endorsement_message;
    use crate::types::NodeId;

    fn user(view: u64, seqno: u64) -> LedgerEntry {
        let mut ws = WriteSet::new();
        ws.put("app.msgs", seqno.to_le_bytes().to_vec(), b"m".to_vec());
        LedgerEntry::seal(
            EntryKind::User,
            TransactionId::new(view, seqno),
            &ws,
            None,
            &SymmetricSecret([1; 32]),
        )
    }

    fn sig(ledger: &Ledger, view: u64, node: &KeyPair, service: &KeyPair) -> LedgerEntry {
        let at = TransactionId::new(view, ledger.last_seqno() + 1);
        let payload = SignaturePayload::create(
            at,
            NodeId(0),
            node,
            service.sign(&endorsement_message(&node.public_id())),
            ledger.pending_root(),
            ledger.view_history().to_vec(),
        );
        LedgerEntry::seal(
            EntryKind::Signature,
            at,
            &payload.write_set(),
            None,
            &SymmetricSecret([1; 32]),
        )
    }

    fn figure_three() -> (Ledger, KeyPair) {
        let service = KeyPair::from_seed([9; 32]);
        let node = KeyPair::from_seed([8; 32]);
        let mut l = Ledger::new();
        for s in 1..=11u64 {
            let e = if [1, 5, 11].contains(&s) {
                sig(&l, 1, &node, &service)
            } else {
                user(1, s)
            };
            l.append(e).unwrap();
        }
        (l, service)
    }

    #[test]
    fn chunks_close_after_each_signature() {
        let (l, _) = figure_three();
        let names: Vec<_> = l.chunks(11).iter().map(|c| c.file_name()).collect();
        assert_eq!(names, ["1-1.ledger", "2-5.ledger", "6-11.ledger"]);
        assert_eq!(l.chunks(10).len(), 2);
    }

    #[test]
    fn append_checks_order() {
        let (mut l, _) = figure_three();
        assert_eq!(l.append(user(1, 14)), Err(LedgerError::Gap { expected: 12, got: 14 }));
        l.append(user(3, 12)).unwrap();
        assert_eq!(
            l.append(user(2, 13)),
            Err(LedgerError::ViewRegression { last: 3, got: 2 })
        );
        assert_eq!(l.view_history(), &[(1, 1), (3, 12)]);
    }

    #[test]
    fn truncate_respects_commit() {
        let (mut l, _) = figure_three();
        l.set_commit(5);
        assert!(l.truncate(4).is_err());
        l.truncate(11).unwrap();
        assert_eq!(l.last_seqno(), 11);
        l.truncate(7).unwrap();
        assert_eq!(l.last_signature(), TransactionId::new(1, 5));
        assert_eq!(l.merkle().leaf_count(), 7);
    }

    #[test]
    fn receipts_from_signature_entries() {
        let (l, service) = figure_three();
        let r = l.receipt(7).unwrap();
        assert_eq!(r.signed_root.signature_txid, TransactionId::new(1, 11));
        assert_eq!(r.proof.path.len(), 4);
        assert!(r.verify(&service.public_id()));
        assert!(l.receipt(11).is_none());
        for s in 1..11 {
            assert!(l.receipt(s).unwrap().verify(&service.public_id()), "seqno {s}");
        }
    }

    #[test]
    fn status_transitions() {
        let mut l = Ledger::new();
        assert_eq!(l.status(&TransactionId::new(1, 1)), TransactionStatus::Unknown);
        let (fig, _) = figure_three();
        for e in fig.entries() {
            l.append(e.clone()).unwrap();
        }
        assert_eq!(l.status(&TransactionId::new(1, 7)), TransactionStatus::Pending);
        l.set_commit(11);
        assert_eq!(l.status(&TransactionId::new(1, 7)), TransactionStatus::Committed);
        assert_eq!(l.status(&TransactionId::new(2, 7)), TransactionStatus::Invalid);
        assert_eq!(l.status(&TransactionId::new(1, 12)), TransactionStatus::Unknown);
        l.append(user(2, 12)).unwrap();
        l.append(user(2, 13)).unwrap();
        assert_eq!(l.status(&TransactionId::new(2, 13)), TransactionStatus::Pending);
        assert_eq!(l.status(&TransactionId::new(1, 13)), TransactionStatus::Unknown);
        assert_eq!(l.status(&TransactionId::new(0, 13)), TransactionStatus::Invalid);
    }
}
