use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_scenario, Scenario, SimError};

/// Summary of one run in a parameter sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub param: String,
    pub value: String,
    pub seed: u64,
    pub ok: bool,
    pub violations: usize,
    pub writes_acked: u64,
    pub writes_committed: u64,
    pub throughput: f64,
    pub mean_ttc_ms: f64,
}

impl Scenario {
    /// Returns a copy with the dotted `path` (for example
    /// `consensus.signature_interval`) set to `value`, parsed as TOML.
    pub fn with_param(&self, path: &str, value: &str) -> Result<Scenario, SimError> {
        let mut doc: toml::Value = toml::Value::try_from(self).map_err(|e| SimError::Scenario(e.to_string()))?;
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let mut slot = &mut doc;
        let parts: Vec<&str> = path.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = slot
                .as_table_mut()
                .ok_or_else(|| SimError::Scenario(format!("{path}: {part} is not a table")))?;
            if i + 1 == parts.len() {
                if !table.contains_key(*part) && !matches!(*part, "liveness_window_ms") {
                    return Err(SimError::Scenario(format!("unknown parameter {path}")));
                }
                table.insert(part.to_string(), parsed.clone());
                break;
            }
            slot = table
                .get_mut(*part)
                .ok_or_else(|| SimError::Scenario(format!("unknown parameter {path}")))?;
        }
        doc.try_into()
            .map_err(|e: toml::de::Error| SimError::Scenario(e.to_string()))
    }
}

/// Runs every `(value, seed)` combination, in parallel where cores allow.
pub fn sweep(base: &Scenario, param: &str, values: &[String], seeds: &[u64]) -> Result<Vec<SweepPoint>, SimError> {
    let mut jobs = Vec::new();
    for v in values {
        let scn = base.with_param(param, v)?;
        for s in seeds {
            let mut scn = scn.clone();
            scn.seed = *s;
            jobs.push((v.clone(), scn));
        }
    }
    jobs.into_par_iter()
        .map(|(value, scn)| {
            let out = run_scenario(&scn)?;
            Ok(SweepPoint {
                param: param.to_string(),
                value,
                seed: scn.seed,
                ok: out.report.ok(),
                violations: out.report.findings.len(),
                writes_acked: out.metrics.writes_acked,
                writes_committed: out.metrics.writes_committed,
                throughput: out.metrics.throughput,
                mean_ttc_ms: out.metrics.mean_ttc_ms,
            })
        })
        .collect()
}
