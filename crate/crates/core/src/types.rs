use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// `(view, seqno)` naming one ledger position. Ordered lexicographically.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct TransactionId {
    pub view: u64,
    pub seqno: u64,
}

impl TransactionId {
    /// Position before the first entry; matches every ledger.
    pub const ORIGIN: TransactionId = TransactionId { view: 0, seqno: 0 };

    pub const fn new(view: u64, seqno: u64) -> TransactionId {
        TransactionId { view, seqno }
    }

    pub fn encode(&self) -> [u8; 16] {
        let mut out = [0u8; 16];
        out[..8].copy_from_slice(&self.view.to_le_bytes());
        out[8..].copy_from_slice(&self.seqno.to_le_bytes());
        out
    }
}

impl fmt::Debug for TransactionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.view, self.seqno)
    }
}

impl fmt::Display for TransactionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.view, self.seqno)
    }
}

impl FromStr for TransactionId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (view, seqno) = s
            .split_once('.')
            .ok_or_else(|| format!("expected view.seqno, got {s:?}"))?;
        Ok(TransactionId {
            view: view.parse().map_err(|e| format!("bad view: {e}"))?,
            seqno: seqno.parse().map_err(|e| format!("bad seqno: {e}"))?,
        })
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub u64);

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MemberId(pub u64);

impl fmt::Debug for MemberId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.0)
    }
}

impl fmt::Display for MemberId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.0)
    }
}

/// Simulated time in microseconds.
pub type Time = u64;

pub const MILLIS: Time = 1_000;
