use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::consensus::ConsensusConfig;
use crate::types::{Time, MILLIS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub nodes: usize,
    /// Client traffic stops after this long.
    pub duration_ms: u64,
    /// Extra time after traffic stops, for commits to settle.
    pub drain_ms: u64,
    pub tick_ms: u64,
    pub code_id: String,
    pub snapshot_interval: u64,
    pub members: usize,
    pub recovery_threshold: u32,
    /// Replace crashed nodes automatically through governance.
    pub auto_replace: bool,
    /// Width of metric buckets.
    pub bucket_ms: u64,
    pub consensus: ConsensusParams,
    pub network: NetworkParams,
    pub cost: CostParams,
    pub workload: Workload,
    pub faults: Vec<FaultStep>,
    pub governance: Vec<GovStep>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "default".into(),
            seed: 0,
            nodes: 3,
            duration_ms: 2000,
            drain_ms: 1500,
            tick_ms: 10,
            code_id: "code-v1".into(),
            snapshot_interval: 0,
            members: 3,
            recovery_threshold: 2,
            auto_replace: false,
            bucket_ms: 100,
            consensus: ConsensusParams::default(),
            network: NetworkParams::default(),
            cost: CostParams::default(),
            workload: Workload::default(),
            faults: Vec::new(),
            governance: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusParams {
    pub election_timeout_min_ms: u64,
    pub election_timeout_max_ms: u64,
    pub heartbeat_ms: u64,
    /// Defaults to twice the maximum election timeout.
    pub liveness_window_ms: Option<u64>,
    pub retransmit_ms: u64,
    pub max_batch: usize,
    pub signature_interval: u64,
    pub signature_max_delay_ms: u64,
    pub fault_vote_twice: bool,
}

impl Default for ConsensusParams {
    fn default() -> Self {
        ConsensusParams {
            election_timeout_min_ms: 150,
            election_timeout_max_ms: 300,
            heartbeat_ms: 50,
            liveness_window_ms: None,
            retransmit_ms: 100,
            max_batch: 256,
            signature_interval: 100,
            signature_max_delay_ms: 50,
            fault_vote_twice: false,
        }
    }
}

impl ConsensusParams {
    pub fn config(&self) -> ConsensusConfig {
        ConsensusConfig {
            election_timeout_min: self.election_timeout_min_ms * MILLIS,
            election_timeout_max: self.election_timeout_max_ms * MILLIS,
            heartbeat: self.heartbeat_ms * MILLIS,
            liveness_window: self.liveness_window_ms.unwrap_or(2 * self.election_timeout_max_ms) * MILLIS,
            retransmit: self.retransmit_ms * MILLIS,
            max_batch: self.max_batch,
            signature_interval: self.signature_interval.max(1),
            signature_max_delay: self.signature_max_delay_ms * MILLIS,
            fault_vote_twice: self.fault_vote_twice,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkParams {
    pub latency_min_us: u64,
    pub latency_max_us: u64,
    pub client_latency_min_us: u64,
    pub client_latency_max_us: u64,
    pub drop_probability: f64,
}

impl Default for NetworkParams {
    fn default() -> Self {
        NetworkParams {
            latency_min_us: 300,
            latency_max_us: 1500,
            client_latency_min_us: 500,
            client_latency_max_us: 1500,
            drop_probability: 0.0,
        }
    }
}

/// Simulated CPU time charged to a node per unit of work.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostParams {
    pub message_us: u64,
    pub request_us: u64,
    pub entry_us: u64,
    pub signature_us: u64,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams {
            message_us: 4,
            request_us: 20,
            entry_us: 6,
            signature_us: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Workload {
    pub clients: usize,
    pub write_fraction: f64,
    /// Share of requests that poll the status of an earlier write.
    pub status_fraction: f64,
    pub think_us: u64,
    pub payload_bytes: usize,
    pub request_timeout_ms: u64,
    pub retry_ms: u64,
}

impl Default for Workload {
    fn default() -> Self {
        Workload {
            clients: 2,
            write_fraction: 0.6,
            status_fraction: 0.2,
            think_us: 5000,
            payload_bytes: 16,
            request_timeout_ms: 300,
            retry_ms: 20,
        }
    }
}

/// When a step fires: `at_ms` after the start, or after the named
/// milestone when `after` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultStep {
    pub at_ms: u64,
    #[serde(default)]
    pub after: Option<String>,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(flatten)]
    pub fault: Fault,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Fault {
    Crash {
        target: Target,
    },
    /// Crash (if alive) and start a fresh node that joins the service.
    RestartAsNew {
        target: Target,
    },
    /// Restart under the old identity from local state; the service is
    /// expected to refuse it.
    ResumeFromDisk {
        target: Target,
    },
    /// Start a fresh node that joins the service.
    Join {
        #[serde(default)]
        code_id: Option<String>,
    },
    Partition {
        groups: Vec<Vec<Target>>,
    },
    Heal,
    SetDrop {
        probability: f64,
    },
    /// Flip one byte of the node's ledger files as written out.
    Tamper {
        target: Target,
        offset: u64,
    },
    /// Crash every node.
    Disaster,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Primary,
    RandomBackup,
    Random,
    /// Most recently joined node.
    Joined,
    Node(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GovStep {
    pub at_ms: u64,
    #[serde(default)]
    pub after: Option<String>,
    #[serde(default)]
    pub label: Option<String>,
    pub member: u64,
    #[serde(flatten)]
    pub kind: GovKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GovKind {
    /// Action arguments may use `"$crashed"` and `"$joined"` for the most
    /// recently crashed and joined node ids.
    Propose {
        actions: Vec<ActionSpec>,
    },
    Vote {
        proposal: String,
        ballot: bool,
    },
    /// Completes once every trusted node is live, no node is mid-retirement
    /// and the configuration is committed.
    AwaitReconfiguration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub name: String,
    #[serde(default)]
    pub args: Value,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Scenario, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn end_time(&self) -> Time {
        (self.duration_ms + self.drain_ms) * MILLIS
    }

    /// A randomized fault schedule over `n` nodes: minority crashes with
    /// replacement, partitions, message loss, latency spread, and a join and
    /// a retirement that may overlap other reconfigurations.
    pub fn adversarial(n: usize, seed: u64) -> Scenario {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xad5e_55a1);
        let mut s = Scenario {
            name: format!("adversarial-n{n}"),
            seed,
            nodes: n,
            duration_ms: 2500,
            drain_ms: 1500,
            auto_replace: true,
            ..Scenario::default()
        };
        s.consensus.signature_interval = rng.gen_range(1..=20);
        s.consensus.signature_max_delay_ms = rng.gen_range(5..=60);
        s.network.latency_min_us = rng.gen_range(100..=1000);
        s.network.latency_max_us = s.network.latency_min_us + rng.gen_range(0..=40_000);
        s.network.drop_probability = [0.0, 0.01, 0.05][rng.gen_range(0..3)];
        s.workload.clients = rng.gen_range(1..=3);
        s.workload.think_us = rng.gen_range(2_000..=20_000);
        let span = s.duration_ms;
        let crashes = rng.gen_range(0..=(n - 1) / 2);
        for _ in 0..crashes {
            let target = [Target::Primary, Target::RandomBackup, Target::Random]
                .choose(&mut rng)
                .cloned()
                .expect("non-empty");
            let fault = if rng.gen_bool(0.5) {
                Fault::Crash { target }
            } else {
                Fault::RestartAsNew { target }
            };
            s.faults.push(FaultStep {
                at_ms: rng.gen_range(100..span),
                after: None,
                label: None,
                fault,
            });
        }
        if n > 1 {
            for _ in 0..rng.gen_range(0..=3) {
                let mut ids: Vec<u64> = (0..n as u64).collect();
                ids.shuffle(&mut rng);
                let cut = rng.gen_range(1..n);
                let groups = vec![
                    ids[..cut].iter().map(|i| Target::Node(*i)).collect(),
                    ids[cut..].iter().map(|i| Target::Node(*i)).collect(),
                ];
                let at = rng.gen_range(50..span);
                s.faults.push(FaultStep {
                    at_ms: at,
                    after: None,
                    label: None,
                    fault: Fault::Partition { groups },
                });
                s.faults.push(FaultStep {
                    at_ms: at + rng.gen_range(100..1200),
                    after: None,
                    label: None,
                    fault: Fault::Heal,
                });
            }
        }
        if rng.gen_bool(0.5) {
            s.faults.push(FaultStep {
                at_ms: rng.gen_range(100..span),
                after: None,
                label: Some("join".into()),
                fault: Fault::Join { code_id: None },
            });
            s.governance.push(GovStep {
                at_ms: rng.gen_range(50..400),
                after: Some("join".into()),
                label: Some("trust".into()),
                member: rng.gen_range(0..s.members as u64),
                kind: GovKind::Propose {
                    actions: vec![ActionSpec {
                        name: "transition_node_to_trusted".into(),
                        args: serde_json::json!({ "node_id": "$joined" }),
                    }],
                },
            });
            for m in 0..s.members as u64 {
                s.governance.push(GovStep {
                    at_ms: rng.gen_range(0..200),
                    after: Some("trust".into()),
                    label: None,
                    member: m,
                    kind: GovKind::Vote {
                        proposal: "trust".into(),
                        ballot: true,
                    },
                });
            }
        }
        if n > 1 && rng.gen_bool(0.4) {
            let victim = rng.gen_range(0..n as u64);
            s.governance.push(GovStep {
                at_ms: rng.gen_range(100..span),
                after: None,
                label: Some("retire".into()),
                member: 0,
                kind: GovKind::Propose {
                    actions: vec![ActionSpec {
                        name: "remove_node".into(),
                        args: serde_json::json!({ "node_id": victim }),
                    }],
                },
            });
            for m in 1..s.members as u64 {
                s.governance.push(GovStep {
                    at_ms: rng.gen_range(0..300),
                    after: Some("retire".into()),
                    label: None,
                    member: m,
                    kind: GovKind::Vote {
                        proposal: "retire".into(),
                        ballot: true,
                    },
                });
            }
        }
        s
    }
}
