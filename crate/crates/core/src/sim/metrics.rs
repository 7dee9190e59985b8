use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::types::{Time, TransactionId, MILLIS};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub start_ms: u64,
    pub writes_acked: u64,
    pub writes_committed: u64,
    pub reads_ok: u64,
    pub status_polls: u64,
    pub declined: u64,
    pub timeouts: u64,
    pub max_commit: u64,
    pub primary: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteRecord {
    pub client: u64,
    pub submitted: Time,
    pub acked: Time,
    pub txid: TransactionId,
    /// First time the write was known committed anywhere.
    pub committed: Option<Time>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub buckets: Vec<Bucket>,
    pub writes: Vec<WriteRecord>,
    pub writes_acked: u64,
    pub writes_committed: u64,
    /// Acknowledged writes per simulated second while clients were active.
    pub throughput: f64,
    /// Mean time from submission to the local response.
    pub mean_response_ms: f64,
    /// Mean time from the local response to global commit.
    pub mean_ttc_ms: f64,
    /// Longest stretch of the load period without an acknowledged write.
    pub max_write_gap_ms: f64,
    pub max_commit: u64,
    pub elections: u64,
    pub milestones: BTreeMap<String, Time>,
}

impl Metrics {
    pub(crate) fn bucket(&mut self, now: Time, width_ms: u64) -> &mut Bucket {
        let i = (now / (width_ms.max(1) * MILLIS)) as usize;
        while self.buckets.len() <= i {
            let start_ms = self.buckets.len() as u64 * width_ms;
            let carry = self
                .buckets
                .last()
                .map(|b| (b.max_commit, b.primary))
                .unwrap_or_default();
            self.buckets.push(Bucket {
                start_ms,
                max_commit: carry.0,
                primary: carry.1,
                ..Bucket::default()
            });
        }
        &mut self.buckets[i]
    }

    pub(crate) fn finalize(&mut self, load_end: Time, commits: &BTreeMap<u64, (TransactionId, Time)>, width_ms: u64) {
        let mut ttc_sum = 0u64;
        let mut committed = 0u64;
        let mut at = Vec::new();
        for w in &mut self.writes {
            w.committed = commits
                .get(&w.txid.seqno)
                .filter(|(t, _)| *t == w.txid)
                .map(|(_, when)| *when);
            if let Some(c) = w.committed {
                committed += 1;
                ttc_sum += c.saturating_sub(w.acked);
                at.push(c);
            }
        }
        for c in at {
            self.bucket(c, width_ms).writes_committed += 1;
        }
        let in_load = self.writes.iter().filter(|w| w.acked <= load_end).count();
        let response: u64 = self.writes.iter().map(|w| w.acked - w.submitted).sum();
        self.mean_response_ms = response as f64 / self.writes.len().max(1) as f64 / MILLIS as f64;
        let mut last = 0;
        let mut gap = 0;
        for w in self.writes.iter().filter(|w| w.acked <= load_end) {
            gap = gap.max(w.acked - last);
            last = w.acked;
        }
        gap = gap.max(load_end.saturating_sub(last));
        self.max_write_gap_ms = gap as f64 / MILLIS as f64;
        self.writes_acked = self.writes.len() as u64;
        self.writes_committed = committed;
        self.throughput = in_load as f64 / (load_end.max(1) as f64 / 1e6);
        self.mean_ttc_ms = if committed == 0 {
            f64::NAN
        } else {
            ttc_sum as f64 / committed as f64 / MILLIS as f64
        };
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "start_ms,writes_acked,writes_committed,reads_ok,status_polls,declined,timeouts,max_commit,primary\n",
        );
        for b in &self.buckets {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                b.start_ms,
                b.writes_acked,
                b.writes_committed,
                b.reads_ok,
                b.status_polls,
                b.declined,
                b.timeouts,
                b.max_commit,
                b.primary.map_or(String::new(), |p| p.to_string())
            );
        }
        out
    }
}
