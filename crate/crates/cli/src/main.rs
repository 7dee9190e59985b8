use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use consortium::crypto::Digest;
use consortium::governance::{Action, Ballot, GovRequest, Proposal, SignedRequest};
use consortium::ledger::{audit_files, AuditReport, EntryKind};
use consortium::merkle::Receipt;
use consortium::sim::{sweep, write_jsonl, CheckReport, Scenario, Simulation, SweepPoint};
use consortium::NodeId;

mod files;
mod recover;

use files::{
    read_json, read_ledger_dir, read_service_id, write_files, write_json, write_service_id, MemberKeyFile,
    SERVICE_ID_FILE,
};

#[derive(Parser)]
#[command(
    name = "consortium",
    version,
    about = "Replicated ledger simulator, auditor and recovery tool"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its trace, metrics and ledgers.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Verify a directory of ledger chunks against a service identity.
    Audit {
        #[arg(long)]
        ledger_dir: PathBuf,
        #[arg(long)]
        service_id: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Check a receipt offline.
    VerifyReceipt {
        #[arg(long)]
        receipt: PathBuf,
        #[arg(long)]
        service_id: PathBuf,
    },
    /// Run a scenario across parameter values and seeds.
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        /// `path=v1,v2,...`, for example `consensus.signature_interval=1,10,100`.
        #[arg(long)]
        param: String,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Also write the per-run CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Sign a proposal as a member.
    Propose {
        #[arg(long)]
        member_key: PathBuf,
        /// `name=<json args>`; repeatable.
        #[arg(long = "action", required_unless_present = "proposal")]
        actions: Vec<String>,
        /// A proposal file instead of `--action`.
        #[arg(long, conflicts_with = "actions")]
        proposal: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        nonce: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sign a ballot as a member.
    Vote {
        #[arg(long)]
        member_key: PathBuf,
        #[arg(long)]
        proposal_id: String,
        #[arg(long, value_parser = ["for", "against"])]
        ballot: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Restore a lost service from one node's ledger files.
    Recover {
        #[command(subcommand)]
        step: RecoverStep,
    },
}

#[derive(Subcommand)]
enum RecoverStep {
    /// Start a recovery service in `--state` from surviving ledger files.
    Start {
        #[arg(long)]
        ledger_dir: PathBuf,
        /// Identity of the lost service.
        #[arg(long)]
        service_id: PathBuf,
        #[arg(long)]
        state: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Submit a signed proposal or ballot.
    SubmitRequest {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        request: PathBuf,
    },
    /// Decrypt a member's recovery share into a share file.
    OpenShare {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        member_key: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Submit a decrypted share; the last one needed completes recovery
    SubmitShare {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        share: PathBuf,
    },
    /// Show the recovery service status
    Status {
        #[arg(long)]
        state: PathBuf,
    },
}

#[derive(Serialize)]
struct NodeAudit {
    node: NodeId,
    tampered: bool,
    passed: bool,
    files: usize,
    /// Ledger starts after a snapshot, so it cannot be audited from genesis.
    snapshot_base: Option<u64>,
    entries: u64,
    violation: Option<String>,
}

#[derive(Serialize)]
struct RunReport<'a> {
    scenario: &'a str,
    seed: u64,
    check: &'a CheckReport,
    writes_acked: u64,
    writes_committed: u64,
    throughput: f64,
    mean_response_ms: f64,
    mean_ttc_ms: f64,
    max_write_gap_ms: f64,
    max_commit: u64,
    milestones: &'a BTreeMap<String, u64>,
    audits: Vec<NodeAudit>,
    passed: bool,
}

fn last_receipt(sim: &Simulation) -> Option<Receipt> {
    let best = sim.nodes().values().max_by_key(|n| n.node.commit_seqno())?;
    let ledger = best.node.ledger();
    ledger
        .range(ledger.base().seqno + 1, best.node.commit_seqno())
        .iter()
        .rev()
        .filter(|e| e.kind == EntryKind::User)
        .find_map(|e| ledger.receipt(e.txid.seqno))
}

fn run(scenario: &Path, seed: Option<u64>, out: &Path, format: Format) -> Result<bool> {
    let text = fs::read_to_string(scenario).with_context(|| format!("reading {}", scenario.display()))?;
    let mut scn = Scenario::from_toml(&text)?;
    if let Some(s) = seed {
        scn.seed = s;
    }
    let name = scn.name.clone();
    let seed = scn.seed;
    let mut sim = Simulation::new(scn)?;
    sim.run();

    fs::create_dir_all(out)?;
    let identity = sim.service_identity();
    write_service_id(&out.join(SERVICE_ID_FILE), &identity)?;
    let members = out.join("members");
    fs::create_dir_all(&members)?;
    for m in sim.members() {
        write_json(
            &members.join(format!("m{}.json", m.id.0)),
            &MemberKeyFile::from_member(m),
        )?;
    }
    let mut audits = Vec::new();
    let ids: Vec<NodeId> = sim.nodes().keys().copied().collect();
    for id in ids {
        let files = sim.ledger_files(id);
        let base = sim.node(id).map_or(0, |n| n.ledger().base().seqno);
        write_files(&out.join("ledger").join(format!("n{}", id.0)), &files)?;
        let report = audit_files(&files, &identity);
        audits.push(NodeAudit {
            node: id,
            tampered: sim.is_tampered(id),
            passed: report.passed(),
            files: files.len(),
            snapshot_base: (base > 0).then_some(base),
            entries: report.entries,
            violation: report.violation.map(|v| format!("seqno {}: {}", v.seqno, v.reason)),
        });
    }
    if let Some(r) = last_receipt(&sim) {
        fs::write(out.join("receipt.json"), r.to_json() + "\n")?;
    }
    let output = sim.finish();
    let mut trace = fs::File::create(out.join("trace.jsonl"))?;
    write_jsonl(&output.trace, &mut std::io::BufWriter::new(&mut trace))?;
    fs::write(out.join("metrics.csv"), output.metrics.to_csv())?;

    // a tampered node failing audit is the expected outcome
    let audits_ok = audits
        .iter()
        .filter(|a| a.files > 0 && a.snapshot_base.is_none())
        .all(|a| a.passed != a.tampered);
    let m = &output.metrics;
    let report = RunReport {
        scenario: &name,
        seed,
        check: &output.report,
        writes_acked: m.writes_acked,
        writes_committed: m.writes_committed,
        throughput: m.throughput,
        mean_response_ms: m.mean_response_ms,
        mean_ttc_ms: m.mean_ttc_ms,
        max_write_gap_ms: m.max_write_gap_ms,
        max_commit: m.max_commit,
        milestones: &m.milestones,
        passed: output.report.ok() && audits_ok,
        audits,
    };
    write_json(&out.join("report.json"), &report)?;
    if format == Format::Json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("scenario {name} seed {seed}");
        println!("trace records {}", output.report.records);
        println!("writes acked {} committed {}", m.writes_acked, m.writes_committed);
        println!("throughput {:.1} tx/s, mean ttc {:.2} ms", m.throughput, m.mean_ttc_ms);
        println!(
            "elections {} commits {}",
            output.report.elections, output.report.commits
        );
        for (label, t) in &m.milestones {
            println!("milestone {label} at {:.1} ms", *t as f64 / 1000.0);
        }
        for a in &report.audits {
            let note = if a.tampered { " (tampered)" } else { "" };
            if a.files == 0 {
                println!("audit {:?}{note}: no ledger files", a.node);
            } else if let Some(b) = a.snapshot_base {
                println!("audit {:?}{note}: skipped, ledger starts after snapshot at {b}", a.node);
            } else {
                let verdict = if a.passed { "PASS" } else { "FAIL" };
                println!(
                    "audit {:?}{note}: {verdict} {}",
                    a.node,
                    a.violation.as_deref().unwrap_or("")
                );
            }
        }
        match output.report.first_violation() {
            Some(f) => println!(
                "invariants: {} violation(s), first {:?}: {}",
                output.report.findings.len(),
                f.invariant,
                f.detail
            ),
            None => println!("invariants: all hold"),
        }
        println!("output in {}", out.display());
    }
    Ok(report.passed)
}

fn audit(ledger_dir: &Path, service_id: &Path, format: Format) -> Result<bool> {
    let files = read_ledger_dir(ledger_dir)?;
    let identity = read_service_id(service_id)?;
    let report: AuditReport = audit_files(&files, &identity);
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&report)?),
        _ => print!("{}", report.summary()),
    }
    Ok(report.passed())
}

fn verify_receipt(receipt: &Path, service_id: &Path) -> Result<bool> {
    let text = fs::read_to_string(receipt).with_context(|| format!("reading {}", receipt.display()))?;
    let r = Receipt::from_json(&text)?;
    let identity = read_service_id(service_id)?;
    let ok = r.verify(&identity);
    println!("receipt for {}: {}", r.txid, if ok { "valid" } else { "INVALID" });
    Ok(ok)
}

/// `signature_interval` alone resolves to the first section that has it.
fn resolve_param(base: &Scenario, path: &str, probe: &str) -> Result<String> {
    if base.with_param(path, probe).is_ok() {
        return Ok(path.to_string());
    }
    for section in ["consensus", "workload", "network", "cost"] {
        let full = format!("{section}.{path}");
        if base.with_param(&full, probe).is_ok() {
            return Ok(full);
        }
    }
    bail!("unknown parameter {path}")
}

fn sweep_cmd(scenario: &Path, param: &str, seeds: u64, out: Option<&Path>, format: Format) -> Result<bool> {
    let text = fs::read_to_string(scenario).with_context(|| format!("reading {}", scenario.display()))?;
    let base = Scenario::from_toml(&text)?;
    let (path, values) = param
        .split_once('=')
        .ok_or_else(|| anyhow!("expected --param path=v1,v2,..."))?;
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
    let path = resolve_param(&base, path, &values[0])?;
    let seeds: Vec<u64> = (1..=seeds).collect();
    let points = sweep(&base, &path, &values, &seeds)?;

    let mut csv = String::from("param,value,seed,ok,violations,writes_acked,writes_committed,throughput,mean_ttc_ms\n");
    for p in &points {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{:.3},{:.4}\n",
            p.param,
            p.value,
            p.seed,
            p.ok,
            p.violations,
            p.writes_acked,
            p.writes_committed,
            p.throughput,
            p.mean_ttc_ms
        ));
    }
    if let Some(o) = out {
        fs::write(o, &csv)?;
    }
    let means = means(&values, &points);
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&points)?),
        Format::Csv => print!("{csv}"),
        Format::Text => {}
    }
    println!("# {path}: value, mean throughput, mean ttc ms");
    for (v, thr, ttc) in &means {
        println!("# {v}, {thr:.1}, {ttc:.3}");
    }
    let safe = points.iter().all(|p| p.ok);
    if !safe {
        println!(
            "# safety violations in {} run(s)",
            points.iter().filter(|p| !p.ok).count()
        );
    }
    let mut trend = true;
    if path.ends_with("signature_interval") {
        let mut by_value = means.clone();
        by_value.sort_by(|a, b| {
            a.0.parse::<f64>()
                .unwrap_or(0.0)
                .total_cmp(&b.0.parse::<f64>().unwrap_or(0.0))
        });
        trend = by_value.windows(2).all(|w| w[0].1 <= w[1].1 && w[0].2 <= w[1].2);
        println!(
            "# trend: throughput non-decreasing and ttc non-decreasing with the interval: {}",
            if trend { "yes" } else { "NO" }
        );
    }
    Ok(safe && trend)
}

fn means(values: &[String], points: &[SweepPoint]) -> Vec<(String, f64, f64)> {
    values
        .iter()
        .map(|v| {
            let at: Vec<_> = points.iter().filter(|p| &p.value == v).collect();
            let n = at.len().max(1) as f64;
            (
                v.clone(),
                at.iter().map(|p| p.throughput).sum::<f64>() / n,
                at.iter().map(|p| p.mean_ttc_ms).sum::<f64>() / n,
            )
        })
        .collect()
}

fn sign_request(member_key: &Path, req: &GovRequest, out: &Path) -> Result<SignedRequest> {
    let key: MemberKeyFile = read_json(member_key)?;
    let signed = SignedRequest::sign(key.member, &key.signing(), req);
    fs::write(out, signed.to_json() + "\n")?;
    Ok(signed)
}

fn propose(member_key: &Path, actions: &[String], proposal: Option<&Path>, nonce: u64, out: &Path) -> Result<()> {
    let proposal = match proposal {
        Some(p) => read_json(p)?,
        None => Proposal {
            actions: actions
                .iter()
                .map(|a| {
                    let (name, args) = a.split_once('=').unwrap_or((a, "{}"));
                    let args = serde_json::from_str(args).with_context(|| format!("arguments of {name}"))?;
                    Ok(Action::new(name, args))
                })
                .collect::<Result<_>>()?,
        },
    };
    let signed = sign_request(member_key, &GovRequest::Propose { proposal, nonce }, out)?;
    println!("proposal id {}", signed.digest().to_hex());
    Ok(())
}

fn vote(member_key: &Path, proposal_id: &str, ballot: &str, out: &Path) -> Result<()> {
    let proposal_id = Digest::from_hex(proposal_id).ok_or_else(|| anyhow!("proposal id must be 64 hex digits"))?;
    let req = GovRequest::Ballot {
        proposal_id,
        ballot: Ballot::Always(ballot == "for"),
    };
    sign_request(member_key, &req, out)?;
    println!("ballot {ballot} on {}", proposal_id.to_hex());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run {
            scenario,
            seed,
            out,
            format,
        } => run(&scenario, seed, &out, format),
        Command::Audit {
            ledger_dir,
            service_id,
            format,
        } => audit(&ledger_dir, &service_id, format),
        Command::VerifyReceipt { receipt, service_id } => verify_receipt(&receipt, &service_id),
        Command::Sweep {
            scenario,
            param,
            seeds,
            out,
            format,
        } => sweep_cmd(&scenario, &param, seeds, out.as_deref(), format),
        Command::Propose {
            member_key,
            actions,
            proposal,
            nonce,
            out,
        } => propose(&member_key, &actions, proposal.as_deref(), nonce, &out).map(|_| true),
        Command::Vote {
            member_key,
            proposal_id,
            ballot,
            out,
        } => vote(&member_key, &proposal_id, &ballot, &out).map(|_| true),
        Command::Recover { step } => match step {
            RecoverStep::Start {
                ledger_dir,
                service_id,
                state,
                seed,
            } => recover::start(&ledger_dir, &service_id, &state, seed),
            RecoverStep::SubmitRequest { state, request } => recover::submit_request(&state, &request),
            RecoverStep::OpenShare { state, member_key, out } => recover::open_member_share(&state, &member_key, &out),
            RecoverStep::SubmitShare { state, share } => recover::submit_share(&state, &share),
            RecoverStep::Status { state } => recover::status(&state),
        }
        .map(|_| true),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
