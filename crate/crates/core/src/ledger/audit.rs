use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{parse_chunk, read_dir_chunks, EntryKind, LedgerEntry, SignaturePayload};
use crate::crypto::{Digest, PublicId};
use crate::governance::{member_identity, ServiceInfo, SignedRequest, SERVICE_KEY};
use crate::kvstore::{maps, Store, Update, WriteSet, GOV_PREFIX};
use crate::merkle::MerkleState;
use crate::types::TransactionId;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// Earliest seqno that may have been altered: the first entry not
    /// covered by a verified signature.
    pub seqno: u64,
    /// Seqno at which the inconsistency surfaced.
    pub detected_at: u64,
    pub file: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GovernanceEvent {
    pub txid: TransactionId,
    pub map: String,
    pub key: String,
    pub value: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub files: usize,
    pub entries: u64,
    pub signatures_verified: u64,
    pub last_verified_signature: Option<TransactionId>,
    pub service_identities: Vec<PublicId>,
    pub trusted_identity_in_chain: bool,
    pub governance: Vec<GovernanceEvent>,
    pub governance_requests_verified: u64,
    pub violation: Option<Violation>,
    pub warnings: Vec<String>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violation.is_none() && self.signatures_verified > 0 && self.trusted_identity_in_chain
    }

    pub fn summary(&self) -> String {
        let mut out = format!(
            "files: {}\nentries: {}\nsignatures verified: {}\nlast verified signature: {}\nservice identities: {}\ngovernance events: {}\ngovernance requests verified: {}\n",
            self.files,
            self.entries,
            self.signatures_verified,
            self.last_verified_signature.map_or("none".into(), |t| t.to_string()),
            self.service_identities.len(),
            self.governance.len(),
            self.governance_requests_verified,
        );
        match &self.violation {
            Some(v) => out.push_str(&format!("VIOLATION at seqno {} ({}): {}\n", v.seqno, v.file, v.reason)),
            None => out.push_str("violations: none\n"),
        }
        for w in &self.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        out.push_str(if self.passed() {
            "result: PASS\n"
        } else {
            "result: FAIL\n"
        });
        out
    }
}

struct Auditor<'a> {
    report: AuditReport,
    trusted: Option<&'a PublicId>,
    current_identity: Option<PublicId>,
    merkle: MerkleState,
    public: Store,
    /// Entries accepted so far, and how many of them a signature covers.
    entries: Vec<LedgerEntry>,
    verified_len: usize,
    pending_events: Vec<GovernanceEvent>,
    pending_requests: u64,
}

impl<'a> Auditor<'a> {
    fn next_seqno(&self) -> u64 {
        self.entries.len() as u64 + 1
    }

    fn first_unverified(&self) -> u64 {
        self.verified_len as u64 + 1
    }

    fn fail(&mut self, detected_at: u64, file: &str, reason: impl Into<String>) {
        self.report.violation = Some(Violation {
            seqno: self.first_unverified(),
            detected_at,
            file: file.to_string(),
            reason: reason.into(),
        });
    }

    fn absorb(&mut self, entry: LedgerEntry, file: &str) -> Result<(), ()> {
        let seqno = entry.txid.seqno;
        let prev_view = self.entries.last().map_or(0, |e| e.txid.view);
        if entry.txid.view < prev_view || entry.txid.view == 0 {
            self.fail(seqno, file, format!("view {} after view {prev_view}", entry.txid.view));
            return Err(());
        }
        let Ok(ws) = entry.public_write_set() else {
            self.fail(seqno, file, "undecodable public write set");
            return Err(());
        };
        self.track_identity(&entry, &ws, file)?;
        self.track_governance(&entry, &ws);
        if self.public.apply(entry.txid, &ws).is_err() {
            self.fail(seqno, file, "store sequencing");
            return Err(());
        }
        if entry.kind == EntryKind::Signature {
            self.check_signature(&entry, &ws, file)?;
        }
        self.merkle.append(entry.leaf());
        self.entries.push(entry);
        if self.entries.last().is_some_and(|e| e.kind == EntryKind::Signature) {
            self.verified_len = self.entries.len();
            self.report.signatures_verified += 1;
            self.report.last_verified_signature = self.entries.last().map(|e| e.txid);
            self.report.governance.append(&mut self.pending_events);
            self.report.governance_requests_verified += std::mem::take(&mut self.pending_requests);
        }
        Ok(())
    }

    fn track_identity(&mut self, entry: &LedgerEntry, ws: &WriteSet, file: &str) -> Result<(), ()> {
        let Some(Update::Put(raw)) = ws.get(maps::SERVICE_INFO, SERVICE_KEY.as_bytes()) else {
            return Ok(());
        };
        let Ok(info) = serde_json::from_slice::<ServiceInfo>(raw) else {
            self.fail(entry.txid.seqno, file, "malformed service info");
            return Err(());
        };
        match self.current_identity {
            None => self.current_identity = Some(info.identity),
            Some(cur) if cur == info.identity => {}
            Some(cur) => {
                if info.previous_identity != Some(cur) {
                    self.fail(
                        entry.txid.seqno,
                        file,
                        format!("service identity at {} does not chain", entry.txid),
                    );
                    return Err(());
                }
                self.current_identity = Some(info.identity);
            }
        }
        if self.report.service_identities.last() != Some(&info.identity) {
            self.report.service_identities.push(info.identity);
        }
        Ok(())
    }

    fn track_governance(&mut self, entry: &LedgerEntry, ws: &WriteSet) {
        for (map, key, update) in ws.iter() {
            if !map.starts_with(GOV_PREFIX) {
                continue;
            }
            if map == maps::HISTORY {
                if let Update::Put(raw) = update {
                    let ok = serde_json::from_slice::<SignedRequest>(raw)
                        .ok()
                        .is_some_and(|req| member_identity(&self.public, req.member).is_some_and(|id| req.verify(&id)));
                    if ok {
                        self.pending_requests += 1;
                    } else {
                        self.report
                            .warnings
                            .push(format!("governance request at {} does not verify", entry.txid));
                    }
                }
            }
            self.pending_events.push(GovernanceEvent {
                txid: entry.txid,
                map: map.to_string(),
                key: String::from_utf8_lossy(key).into_owned(),
                value: match update {
                    Update::Put(v) => Some(String::from_utf8_lossy(v).into_owned()),
                    Update::Remove => None,
                },
            });
        }
    }

    fn check_signature(&mut self, entry: &LedgerEntry, ws: &WriteSet, file: &str) -> Result<(), ()> {
        let at = entry.txid.seqno;
        let Some(payload) = SignaturePayload::from_write_set(ws) else {
            self.fail(at, file, format!("signature entry {} has no payload", entry.txid));
            return Err(());
        };
        if ws.len() != 1 || !entry.private.is_empty() || entry.claims.is_some() {
            self.fail(
                at,
                file,
                format!("signature entry {} carries extra content", entry.txid),
            );
            return Err(());
        }
        let expected = if entry.txid.seqno == 1 {
            Digest::ZERO
        } else {
            self.merkle.root().unwrap_or(Digest::ZERO)
        };
        if payload.root != expected {
            self.fail(
                at,
                file,
                format!("root in {} does not match the recomputed tree", entry.txid),
            );
            return Err(());
        }
        if !payload.verify_signature(&entry.txid) {
            self.fail(at, file, format!("bad root signature in {}", entry.txid));
            return Err(());
        }
        let Some(identity) = self.current_identity.or(self.trusted.copied()) else {
            self.fail(at, file, "no service identity to check endorsements against");
            return Err(());
        };
        if !payload.verify_endorsement(&identity) {
            self.fail(
                at,
                file,
                format!("signer of {} is not endorsed by the service", entry.txid),
            );
            return Err(());
        }
        Ok(())
    }
}

/// Verifies ledger files and returns the report with every entry covered
/// by a verified signature.
pub(crate) fn verify_files(files: &[(String, Vec<u8>)], trusted: Option<&PublicId>) -> (AuditReport, Vec<LedgerEntry>) {
    let mut a = Auditor {
        report: AuditReport {
            files: files.len(),
            ..Default::default()
        },
        trusted,
        current_identity: None,
        merkle: MerkleState::new(),
        public: Store::new(),
        entries: Vec::new(),
        verified_len: 0,
        pending_events: Vec::new(),
        pending_requests: 0,
    };
    'files: for (name, bytes) in files {
        let named = name
            .strip_suffix(".ledger")
            .and_then(|s| s.split_once('-'))
            .and_then(|(f, l)| Some((f.parse::<u64>().ok()?, l.parse::<u64>().ok()?)));
        let Some((first, last)) = named else {
            a.fail(a.first_unverified(), name, "unrecognised file name");
            break;
        };
        if first != a.next_seqno() {
            a.fail(
                a.next_seqno().min(first),
                name,
                format!("expected a file starting at {}", a.next_seqno()),
            );
            break;
        }
        let parsed = parse_chunk(bytes);
        for (i, (entry, _)) in parsed.entries.into_iter().enumerate() {
            let expect = first + i as u64;
            if entry.txid.seqno != expect {
                a.fail(
                    expect,
                    name,
                    format!("entry {} where seqno {expect} was expected", entry.txid),
                );
                break 'files;
            }
            if a.absorb(entry, name).is_err() {
                break 'files;
            }
        }
        if let Some(e) = parsed.error {
            a.fail(a.next_seqno(), name, format!("unparseable entry: {e}"));
            break;
        }
        if a.next_seqno() != last + 1 {
            a.fail(
                a.first_unverified(),
                name,
                format!("file ends at {} not {last}", a.next_seqno() - 1),
            );
            break;
        }
        if a.verified_len != a.entries.len() {
            a.fail(a.first_unverified(), name, "file does not end with a signature entry");
            break;
        }
    }
    a.report.entries = a.entries.len() as u64;
    a.report.trusted_identity_in_chain = match trusted {
        Some(t) => {
            a.report.service_identities.contains(t)
                || (a.report.service_identities.is_empty() && a.report.signatures_verified > 0)
        }
        None => true,
    };
    if !a.report.trusted_identity_in_chain {
        a.report
            .warnings
            .push("trusted service identity does not appear in the ledger's identity chain".into());
    }
    if let Some(last) = a.report.last_verified_signature {
        a.report.warnings.push(format!(
            "integrity is anchored at the final signature {last}; a rollback to any earlier signed prefix cannot be detected from these files alone"
        ));
    }
    let mut verified = a.entries;
    verified.truncate(a.verified_len);
    (a.report, verified)
}

pub fn audit_files(files: &[(String, Vec<u8>)], service: &PublicId) -> AuditReport {
    verify_files(files, Some(service)).0
}

pub fn audit_dir(dir: &Path, service: &PublicId) -> io::Result<AuditReport> {
    let files: Vec<_> = read_dir_chunks(dir)?.into_iter().map(|(n, _, b)| (n, b)).collect();
    Ok(audit_files(&files, service))
}
