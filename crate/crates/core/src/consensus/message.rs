use crate::ledger::LedgerEntry;
use crate::types::{NodeId, TransactionId};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Message {
    pub from: NodeId,
    pub to: NodeId,
    pub body: MessageBody,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MessageBody {
    AppendEntries {
        view: u64,
        /// Position immediately before `entries`.
        prev: TransactionId,
        entries: Vec<LedgerEntry>,
        commit: u64,
    },
    /// On success `last_seqno` is the last position known to match the
    /// primary; on failure it is the seqno to resume from.
    AppendEntriesResponse {
        view: u64,
        success: bool,
        last_seqno: u64,
    },
    RequestVote {
        view: u64,
        last_signature: TransactionId,
    },
    RequestVoteResponse {
        view: u64,
        granted: bool,
    },
}

impl MessageBody {
    pub fn view(&self) -> u64 {
        match self {
            MessageBody::AppendEntries { view, .. }
            | MessageBody::AppendEntriesResponse { view, .. }
            | MessageBody::RequestVote { view, .. }
            | MessageBody::RequestVoteResponse { view, .. } => *view,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            MessageBody::AppendEntries { .. } => "append_entries",
            MessageBody::AppendEntriesResponse { .. } => "append_entries_response",
            MessageBody::RequestVote { .. } => "request_vote",
            MessageBody::RequestVoteResponse { .. } => "request_vote_response",
        }
    }

    pub fn entry_count(&self) -> usize {
        match self {
            MessageBody::AppendEntries { entries, .. } => entries.len(),
            _ => 0,
        }
    }
}
