use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::crypto::Digest;
use crate::governance::ProposalStatus;
use crate::ledger::TransactionStatus;
use crate::node::NodeEvent;
use crate::types::{NodeId, Time, TransactionId};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: Time,
    #[serde(flatten)]
    pub event: TraceEvent,
}

/// Who issued a request: a client, or a member running a governance step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Caller {
    Client(u64),
    Member(u64),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceEvent {
    Deliver {
        from: NodeId,
        to: NodeId,
        kind: String,
        entries: usize,
    },
    Drop {
        from: NodeId,
        to: NodeId,
        kind: String,
        reason: String,
    },
    Node {
        node: NodeId,
        #[serde(flatten)]
        event: NodeEvent,
    },
    Request {
        caller: Caller,
        node: NodeId,
        op: String,
    },
    Forward {
        caller: Caller,
        from: NodeId,
        to: NodeId,
    },
    Outcome {
        caller: Caller,
        node: NodeId,
        #[serde(flatten)]
        outcome: Outcome,
        submitted: Time,
    },
    Timeout {
        caller: Caller,
        node: NodeId,
    },
    Fault {
        description: String,
    },
    Started {
        node: NodeId,
        joining: bool,
    },
    Milestone {
        label: String,
    },
    /// The service was rebuilt from ledger files under a new identity.
    Reset,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Outcome {
    Written {
        txid: TransactionId,
    },
    Read {
        found: bool,
        read_at: TransactionId,
    },
    Status {
        txid: TransactionId,
        status: TransactionStatus,
    },
    Governance {
        step: usize,
        proposal_id: Digest,
        status: ProposalStatus,
        txid: Option<TransactionId>,
    },
    Declined {
        reason: String,
    },
}

/// Writes one JSON object per line.
pub fn write_jsonl(trace: &[TraceRecord], out: &mut impl Write) -> io::Result<()> {
    for r in trace {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn to_jsonl(trace: &[TraceRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    write_jsonl(trace, &mut out).expect("writing to memory");
    out
}
